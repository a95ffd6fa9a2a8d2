//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order (already topological); the reverse
//! pass walks the tape backwards once, scattering adjoints to parents. A leaf
//! used many times (a shared block applied at every recurrent step) is one
//! node whose adjoint accumulates across all uses, which is exactly the tied
//! weight-sharing gradient.
//!
//! The tape supports one backward pass by default; constructing it with
//! `retaining()` allows repeated passes (each starts from fresh adjoints).
//! Second-order differentiation is out of scope: adjoints are plain values.

use crate::scalar::{gelu, gelu_grad, Scalar};
use crate::tensor::{self, Tensor, Trans};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    /// a[.., d] + b[d]
    AddBias(Var, Var),
    /// a[B, T, d] + b[T, d]
    AddRows(Var, Var),
    Scale(Var, T),
    /// Elementwise product with a constant tensor (e.g. a binary mask).
    MulConst(Var, Tensor<T>),
    Hadamard(Var, Var),
    Mm {
        a: Var,
        b: Var,
        ta: Trans,
        tb: Trans,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: Trans,
        tb: Trans,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        eps: T,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    /// [B, T, d] -> [B*H, T, d/H]
    SplitHeads {
        x: Var,
        heads: usize,
    },
    /// [B*H, T, d/H] -> [B, T, d]
    MergeHeads {
        x: Var,
        heads: usize,
    },
    /// [B, T, d] -> [B, d] at token index.
    SelectToken {
        x: Var,
        index: usize,
    },
    /// Leading [r_i, d] parts broadcast over batch, then patch tokens [B, N, d].
    ConcatTokens {
        leading: Vec<Var>,
        patches: Var,
    },
    /// [B, C, H, W] -> [B, N, C*p*p], row-major over (channel, patch-row, patch-col).
    Patchify {
        images: Var,
        patch: usize,
    },
    /// Rows [start, start+len) of a 2-D tensor.
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    /// Gather entries of a 1-D tensor.
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    /// out[i, j] = a[i] - b[j]
    OuterDiff(Var, Var),
    /// [n, K] -> [n]
    LogSumExpRows(Var),
    /// Mean over rows of (logsumexp(row) - dot(q_row, row)); q constant.
    CeWithQ {
        logits: Var,
        q: Tensor<T>,
    },
    /// Sum of squared horizontal and vertical forward differences.
    TvLoss(Var),
    /// base with delta added into last-dim columns [start, start+delta_cols).
    AddIntoCols {
        base: Var,
        delta: Var,
        start: usize,
    },
    /// Columns [start, start+len) of the last dim.
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    retain: bool,
    consumed: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("backward called twice on a non-retaining tape")]
    Consumed,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            retain: false,
            consumed: false,
        }
    }

    /// A tape that may run backward more than once.
    pub fn retaining() -> Self {
        Tape {
            nodes: Vec::new(),
            retain: true,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf node; `trainable` marks it as wanting a gradient.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    // -- arithmetic ---------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::add(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::add_bias(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::AddBias(a, b), ng)
    }

    pub fn add_rows(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(ash.len(), 3, "add_rows lhs must be [B,T,d]");
        assert_eq!(&ash[1..], &bsh[..], "add_rows row block {bsh:?} vs {ash:?}");
        let rows = self.value(b).data();
        let stride = bsh[0] * bsh[1];
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(stride) {
            for (o, &r) in chunk.iter_mut().zip(rows) {
                *o += r;
            }
        }
        let v = Tensor::new(&ash, out);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::AddRows(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = tensor::scale(self.value(a), c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn mul_const(&mut self, a: Var, m: Tensor<T>) -> Var {
        let v = tensor::hadamard(self.value(a), &m);
        let ng = self.needs(a);
        self.push(v, Op::MulConst(a, m), ng)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::hadamard(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Hadamard(a, b), ng)
    }

    pub fn mm(&mut self, a: Var, ta: Trans, b: Var, tb: Trans) -> Var {
        let v = tensor::mm(self.value(a), ta, self.value(b), tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mm { a, b, ta, tb }, ng)
    }

    pub fn bmm(&mut self, a: Var, ta: Trans, b: Var, tb: Trans) -> Var {
        let v = tensor::bmm(self.value(a), ta, self.value(b), tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Bmm { a, b, ta, tb }, ng)
    }

    // -- nonlinearities ------------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = tensor::softmax_last(self.value(a));
        let ng = self.needs(a);
        self.push(v, Op::Softmax(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.maximum(T::ZERO));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::ONE / (T::ONE + (-x).exp()));
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Var {
        let v = tensor::rmsnorm_last(self.value(x), self.value(gain), eps);
        let ng = self.needs(x) || self.needs(gain);
        self.push(v, Op::RmsNorm { x, gain, eps }, ng)
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(tensor::sum_all(self.value(a)));
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let v = Tensor::scalar(tensor::sum_all(self.value(a)) / T::from_f64(n as f64));
        let ng = self.needs(a);
        self.push(v, Op::Mean(a), ng)
    }

    // -- shape plumbing -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape);
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let sh = self.value(x).shape().to_vec();
        assert_eq!(sh.len(), 3, "split_heads wants [B,T,d]");
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        assert_eq!(d % heads, 0, "dim {d} not divisible by {heads} heads");
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; b * t * d];
        for bi in 0..b {
            for ti in 0..t {
                let row = &src[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for h in 0..heads {
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let v = Tensor::new(&[b * heads, t, dh], out);
        let ng = self.needs(x);
        self.push(v, Op::SplitHeads { x, heads }, ng)
    }

    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let sh = self.value(x).shape().to_vec();
        assert_eq!(sh.len(), 3, "merge_heads wants [B*H,T,dh]");
        let (bh, t, dh) = (sh[0], sh[1], sh[2]);
        assert_eq!(bh % heads, 0);
        let b = bh / heads;
        let d = dh * heads;
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let s = ((bi * heads + h) * t + ti) * dh;
                    let dst = (bi * t + ti) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let v = Tensor::new(&[b, t, d], out);
        let ng = self.needs(x);
        self.push(v, Op::MergeHeads { x, heads }, ng)
    }

    pub fn select_token(&mut self, x: Var, index: usize) -> Var {
        let sh = self.value(x).shape().to_vec();
        assert_eq!(sh.len(), 3, "select_token wants [B,T,d]");
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        assert!(index < t, "token index {index} out of {t}");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&src[(bi * t + index) * d..(bi * t + index) * d + d]);
        }
        let v = Tensor::new(&[b, d], out);
        let ng = self.needs(x);
        self.push(v, Op::SelectToken { x, index }, ng)
    }

    /// Assemble the token sequence: each leading part is [r_i, d] (broadcast
    /// over the batch), followed by per-sample patch tokens [B, N, d].
    pub fn concat_tokens(&mut self, leading: &[Var], patches: Var) -> Var {
        let psh = self.value(patches).shape().to_vec();
        assert_eq!(psh.len(), 3, "concat_tokens patches want [B,N,d]");
        let (b, n, d) = (psh[0], psh[1], psh[2]);
        let mut lead_rows = 0usize;
        for &l in leading {
            let lsh = self.value(l).shape();
            assert_eq!(lsh.len(), 2, "leading token blocks must be [rows, d]");
            assert_eq!(lsh[1], d, "leading token dim {} vs {}", lsh[1], d);
            lead_rows += lsh[0];
        }
        let t = lead_rows + n;
        let mut out = vec![T::ZERO; b * t * d];
        for bi in 0..b {
            let mut row = 0usize;
            for &l in leading {
                let lv = self.value(l);
                let rows = lv.shape()[0];
                out[(bi * t + row) * d..(bi * t + row + rows) * d].copy_from_slice(lv.data());
                row += rows;
            }
            let src = &self.value(patches).data()[bi * n * d..(bi + 1) * n * d];
            out[(bi * t + row) * d..(bi * t + row + n) * d].copy_from_slice(src);
        }
        let v = Tensor::new(&[b, t, d], out);
        let ng = leading.iter().any(|&l| self.needs(l)) || self.needs(patches);
        self.push(
            v,
            Op::ConcatTokens {
                leading: leading.to_vec(),
                patches,
            },
            ng,
        )
    }

    pub fn patchify(&mut self, images: Var, patch: usize) -> Var {
        let sh = self.value(images).shape().to_vec();
        assert_eq!(sh.len(), 4, "patchify wants [B,C,H,W]");
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert!(
            h % patch == 0 && w % patch == 0,
            "image {h}x{w} not divisible by patch {patch}"
        );
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let pd = c * patch * patch;
        let src = self.value(images).data();
        let mut out = vec![T::ZERO; b * n * pd];
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = gy * gw + gx;
                    let dst = (bi * n + tok) * pd;
                    for ci in 0..c {
                        for py in 0..patch {
                            let srow = (bi * c + ci) * h * w + (gy * patch + py) * w + gx * patch;
                            let drow = dst + ci * patch * patch + py * patch;
                            out[drow..drow + patch].copy_from_slice(&src[srow..srow + patch]);
                        }
                    }
                }
            }
        }
        let v = Tensor::new(&[b, n, pd], out);
        let ng = self.needs(images);
        self.push(v, Op::Patchify { images, patch }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let sh = self.value(x).shape().to_vec();
        assert_eq!(sh.len(), 2, "slice_rows wants a 2-D tensor");
        assert!(start + len <= sh[0], "rows {start}+{len} out of {}", sh[0]);
        let d = sh[1];
        let v = Tensor::new(
            &[len, d],
            self.value(x).data()[start * d..(start + len) * d].to_vec(),
        );
        let ng = self.needs(x);
        self.push(v, Op::SliceRows { x, start, len }, ng)
    }

    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let sh = self.value(x).shape().to_vec();
        assert_eq!(sh.len(), 1, "gather wants a 1-D tensor");
        let src = self.value(x).data();
        let v = Tensor::new(&[idx.len()], idx.iter().map(|&i| src[i]).collect());
        let ng = self.needs(x);
        self.push(
            v,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    pub fn outer_diff(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = (self.value(a).numel(), self.value(b).numel());
        let (av, bv) = (self.value(a).data().to_vec(), self.value(b).data().to_vec());
        let mut out = Vec::with_capacity(m * n);
        for &x in &av {
            for &y in &bv {
                out.push(x - y);
            }
        }
        let v = Tensor::new(&[m, n], out);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::OuterDiff(a, b), ng)
    }

    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let v = tensor::logsumexp_last(self.value(x));
        let ng = self.needs(x);
        self.push(v, Op::LogSumExpRows(x), ng)
    }

    /// Cross-entropy from logits against a constant target distribution `q`
    /// (rows sum to 1), averaged over rows.
    pub fn ce_with_q(&mut self, logits: Var, q: Tensor<T>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), q.shape(), "logits {:?} vs targets {:?}", lv.shape(), q.shape());
        let k = lv.last_dim();
        let rows = lv.numel() / k;
        let lse = tensor::logsumexp_last(lv);
        let mut loss = T::ZERO;
        for (i, (lrow, qrow)) in lv.data().chunks(k).zip(q.data().chunks(k)).enumerate() {
            let mut dot = T::ZERO;
            for (&l, &qv) in lrow.iter().zip(qrow) {
                dot += l * qv;
            }
            loss += lse.data()[i] - dot;
        }
        let v = Tensor::scalar(loss / T::from_f64(rows as f64));
        let ng = self.needs(logits);
        self.push(v, Op::CeWithQ { logits, q }, ng)
    }

    /// Squared total variation over the two spatial axes of [B, C, H, W].
    pub fn tv_loss(&mut self, images: Var) -> Var {
        let sh = self.value(images).shape().to_vec();
        assert_eq!(sh.len(), 4, "tv_loss wants [B,C,H,W]");
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let src = self.value(images).data();
        let mut acc = T::ZERO;
        for plane in 0..b * c {
            let base = plane * h * w;
            for y in 0..h {
                for x in 0..w {
                    let v = src[base + y * w + x];
                    if y + 1 < h {
                        let d = src[base + (y + 1) * w + x] - v;
                        acc += d * d;
                    }
                    if x + 1 < w {
                        let d = src[base + y * w + x + 1] - v;
                        acc += d * d;
                    }
                }
            }
        }
        let v = Tensor::scalar(acc);
        let ng = self.needs(images);
        self.push(v, Op::TvLoss(images), ng)
    }

    pub fn add_into_cols(&mut self, base: Var, delta: Var, start: usize) -> Var {
        let bsh = self.value(base).shape().to_vec();
        let dsh = self.value(delta).shape().to_vec();
        let bd = *bsh.last().expect("rank >= 1");
        let dd = *dsh.last().expect("rank >= 1");
        assert_eq!(
            bsh[..bsh.len() - 1],
            dsh[..dsh.len() - 1],
            "add_into_cols leading shapes differ"
        );
        assert!(start + dd <= bd, "cols {start}+{dd} out of {bd}");
        let mut out = self.value(base).to_vec();
        let delta_v = self.value(delta).data();
        for (row, drow) in out.chunks_mut(bd).zip(delta_v.chunks(dd)) {
            for (o, &d) in row[start..start + dd].iter_mut().zip(drow) {
                *o += d;
            }
        }
        let v = Tensor::new(&bsh, out);
        let ng = self.needs(base) || self.needs(delta);
        self.push(v, Op::AddIntoCols { base, delta, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let sh = self.value(x).shape().to_vec();
        let d = *sh.last().expect("rank >= 1");
        assert!(start + len <= d, "cols {start}+{len} out of {d}");
        let rows = self.value(x).numel() / d;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let mut nsh = sh.clone();
        *nsh.last_mut().expect("rank >= 1") = len;
        let v = Tensor::new(&nsh, out);
        let ng = self.needs(x);
        self.push(v, Op::SliceCols { x, start, len }, ng)
    }

    // -- reverse pass ---------------------------------------------------------

    /// Populate adjoints for every grad-requiring node reachable from `out`.
    /// Returns the per-node adjoint store; index with `Var`.
    pub fn backward(&mut self, out: Var) -> Result<Grads<T>, TapeError> {
        if self.value(out).numel() != 1 {
            return Err(TapeError::NonScalarOutput(self.value(out).shape().to_vec()));
        }
        if self.consumed {
            return Err(TapeError::Consumed);
        }
        if !self.retain {
            self.consumed = true;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::ONE]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.scatter(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, add: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::ZERO; self.nodes[v.0].value.numel()]);
        }
        add(slot.as_mut().expect("just filled"));
    }

    #[allow(clippy::too_many_lines)]
    fn scatter(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape().to_vec();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (x, &gv) in gb.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
            }
            Op::AddBias(a, b) => {
                self.accum(grads, *a, |ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
                let d = self.nodes[b.0].value.numel();
                self.accum(grads, *b, |gb| {
                    for row in g.chunks(d) {
                        for (x, &gv) in gb.iter_mut().zip(row) {
                            *x += gv;
                        }
                    }
                });
            }
            Op::AddRows(a, b) => {
                self.accum(grads, *a, |ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
                let stride = self.nodes[b.0].value.numel();
                self.accum(grads, *b, |gb| {
                    for chunk in g.chunks(stride) {
                        for (x, &gv) in gb.iter_mut().zip(chunk) {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, |ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv * c;
                    }
                });
            }
            Op::MulConst(a, m) => {
                self.accum(grads, *a, |ga| {
                    for ((x, &gv), &mv) in ga.iter_mut().zip(g).zip(m.data()) {
                        *x += gv * mv;
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                self.accum(grads, *a, |ga| {
                    for ((x, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gv * y;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for ((x, &gv), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gv * y;
                    }
                });
            }
            Op::Mm { a, b, ta, tb } => {
                let gt = Tensor::new(&out_shape, g.to_vec());
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.nodes[a.0].needs_grad {
                    let da = match (ta, tb) {
                        (Trans::N, Trans::N) => tensor::mm(&gt, Trans::N, bv, Trans::T),
                        (Trans::N, Trans::T) => tensor::mm(&gt, Trans::N, bv, Trans::N),
                        (Trans::T, Trans::N) => tensor::mm(bv, Trans::N, &gt, Trans::T),
                        (Trans::T, Trans::T) => tensor::mm(bv, Trans::T, &gt, Trans::T),
                    };
                    self.accum(grads, *a, |ga| {
                        for (x, &gv) in ga.iter_mut().zip(da.data()) {
                            *x += gv;
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let db = match (ta, tb) {
                        (Trans::N, Trans::N) => tensor::mm(av, Trans::T, &gt, Trans::N),
                        (Trans::N, Trans::T) => tensor::mm(&gt, Trans::T, av, Trans::N),
                        (Trans::T, Trans::N) => tensor::mm(av, Trans::N, &gt, Trans::N),
                        (Trans::T, Trans::T) => tensor::mm(&gt, Trans::T, av, Trans::T),
                    };
                    self.accum(grads, *b, |gb| {
                        for (x, &gv) in gb.iter_mut().zip(db.data()) {
                            *x += gv;
                        }
                    });
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let gt = Tensor::new(&out_shape, g.to_vec());
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.nodes[a.0].needs_grad {
                    let da = match (ta, tb) {
                        (Trans::N, Trans::N) => tensor::bmm(&gt, Trans::N, bv, Trans::T),
                        (Trans::N, Trans::T) => tensor::bmm(&gt, Trans::N, bv, Trans::N),
                        (Trans::T, Trans::N) => tensor::bmm(bv, Trans::N, &gt, Trans::T),
                        (Trans::T, Trans::T) => tensor::bmm(bv, Trans::T, &gt, Trans::T),
                    };
                    self.accum(grads, *a, |ga| {
                        for (x, &gv) in ga.iter_mut().zip(da.data()) {
                            *x += gv;
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let db = match (ta, tb) {
                        (Trans::N, Trans::N) => tensor::bmm(av, Trans::T, &gt, Trans::N),
                        (Trans::N, Trans::T) => tensor::bmm(&gt, Trans::T, av, Trans::N),
                        (Trans::T, Trans::N) => tensor::bmm(av, Trans::N, &gt, Trans::N),
                        (Trans::T, Trans::T) => tensor::bmm(&gt, Trans::T, av, Trans::T),
                    };
                    self.accum(grads, *b, |gb| {
                        for (x, &gv) in gb.iter_mut().zip(db.data()) {
                            *x += gv;
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let d = self.nodes[i].value.last_dim();
                self.accum(grads, *a, |ga| {
                    for ((grow, yrow), garow) in
                        g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d))
                    {
                        let mut dot = T::ZERO;
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            dot += gv * yv;
                        }
                        for ((x, &gv), &yv) in garow.iter_mut().zip(grow).zip(yrow) {
                            *x += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.nodes[a.0].value.data();
                self.accum(grads, *a, |ga| {
                    for ((x, &gv), &iv) in ga.iter_mut().zip(g).zip(xv) {
                        *x += gv * gelu_grad(iv);
                    }
                });
            }
            Op::Relu(a) => {
                let xv = self.nodes[a.0].value.data();
                self.accum(grads, *a, |ga| {
                    for ((x, &gv), &iv) in ga.iter_mut().zip(g).zip(xv) {
                        if iv > T::ZERO {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                self.accum(grads, *a, |ga| {
                    for ((x, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gv * yv * (T::ONE - yv);
                    }
                });
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gain.0].value.data();
                let d = self.nodes[x.0].value.last_dim();
                let dn = T::from_f64(d as f64);
                let eps = *eps;
                if self.nodes[x.0].needs_grad {
                    self.accum(grads, *x, |gx| {
                        for ((grow, xrow), gxrow) in
                            g.chunks(d).zip(xv.chunks(d)).zip(gx.chunks_mut(d))
                        {
                            let mut ms = T::ZERO;
                            for &v in xrow {
                                ms += v * v;
                            }
                            let r = T::ONE / (ms / dn + eps).sqrt();
                            let mut s = T::ZERO;
                            for ((&gvv, &gw), &xw) in grow.iter().zip(gv).zip(xrow) {
                                s += gvv * gw * xw;
                            }
                            let coef = r * r * r / dn * s;
                            for ((o, (&gvv, &gw)), &xw) in
                                gxrow.iter_mut().zip(grow.iter().zip(gv)).zip(xrow)
                            {
                                *o += r * gw * gvv - coef * xw;
                            }
                        }
                    });
                }
                if self.nodes[gain.0].needs_grad {
                    self.accum(grads, *gain, |gg| {
                        for (grow, xrow) in g.chunks(d).zip(xv.chunks(d)) {
                            let mut ms = T::ZERO;
                            for &v in xrow {
                                ms += v * v;
                            }
                            let r = T::ONE / (ms / dn + eps).sqrt();
                            for ((o, &gvv), &xw) in gg.iter_mut().zip(grow).zip(xrow) {
                                *o += gvv * xw * r;
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                let gs = g[0];
                self.accum(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gs;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let gs = g[0] / T::from_f64(n as f64);
                self.accum(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gs;
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let sh = self.nodes[x.0].value.shape().to_vec();
                let (b, t, d) = (sh[0], sh[1], sh[2]);
                let dh = d / heads;
                let heads = *heads;
                self.accum(grads, *x, |gx| {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..heads {
                                let s = ((bi * heads + h) * t + ti) * dh;
                                let dst = (bi * t + ti) * d + h * dh;
                                for j in 0..dh {
                                    gx[dst + j] += g[s + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let sh = self.nodes[x.0].value.shape().to_vec();
                let (bh, t, dh) = (sh[0], sh[1], sh[2]);
                let heads = *heads;
                let b = bh / heads;
                let d = dh * heads;
                self.accum(grads, *x, |gx| {
                    for bi in 0..b {
                        for h in 0..heads {
                            for ti in 0..t {
                                let dst = ((bi * heads + h) * t + ti) * dh;
                                let s = (bi * t + ti) * d + h * dh;
                                for j in 0..dh {
                                    gx[dst + j] += g[s + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::SelectToken { x, index } => {
                let sh = self.nodes[x.0].value.shape().to_vec();
                let (b, t, d) = (sh[0], sh[1], sh[2]);
                let index = *index;
                self.accum(grads, *x, |gx| {
                    for bi in 0..b {
                        let dst = (bi * t + index) * d;
                        for j in 0..d {
                            gx[dst + j] += g[bi * d + j];
                        }
                    }
                });
            }
            Op::ConcatTokens { leading, patches } => {
                let psh = self.nodes[patches.0].value.shape().to_vec();
                let (b, n, d) = (psh[0], psh[1], psh[2]);
                let lead_rows: usize = leading
                    .iter()
                    .map(|l| self.nodes[l.0].value.shape()[0])
                    .sum();
                let t = lead_rows + n;
                let mut row0 = 0usize;
                for &l in leading {
                    let rows = self.nodes[l.0].value.shape()[0];
                    self.accum(grads, l, |gl| {
                        for bi in 0..b {
                            let src = (bi * t + row0) * d;
                            for (x, &gvv) in gl.iter_mut().zip(&g[src..src + rows * d]) {
                                *x += gvv;
                            }
                        }
                    });
                    row0 += rows;
                }
                self.accum(grads, *patches, |gp| {
                    for bi in 0..b {
                        let src = (bi * t + row0) * d;
                        let dst = bi * n * d;
                        for j in 0..n * d {
                            gp[dst + j] += g[src + j];
                        }
                    }
                });
            }
            Op::Patchify { images, patch } => {
                let sh = self.nodes[images.0].value.shape().to_vec();
                let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let patch = *patch;
                let (gh, gw) = (h / patch, w / patch);
                let n = gh * gw;
                let pd = c * patch * patch;
                self.accum(grads, *images, |gi| {
                    for bi in 0..b {
                        for gy in 0..gh {
                            for gx in 0..gw {
                                let tok = gy * gw + gx;
                                let src = (bi * n + tok) * pd;
                                for ci in 0..c {
                                    for py in 0..patch {
                                        let drow = (bi * c + ci) * h * w
                                            + (gy * patch + py) * w
                                            + gx * patch;
                                        let srow = src + ci * patch * patch + py * patch;
                                        for j in 0..patch {
                                            gi[drow + j] += g[srow + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SliceRows { x, start, len } => {
                let d = self.nodes[x.0].value.shape()[1];
                let (start, len) = (*start, *len);
                self.accum(grads, *x, |gx| {
                    for (x, &gv) in gx[start * d..(start + len) * d].iter_mut().zip(g) {
                        *x += gv;
                    }
                });
            }
            Op::Gather { x, idx } => {
                self.accum(grads, *x, |gx| {
                    for (pos, &src) in idx.iter().enumerate() {
                        gx[src] += g[pos];
                    }
                });
            }
            Op::OuterDiff(a, b) => {
                let n = self.nodes[b.0].value.numel();
                let m = self.nodes[a.0].value.numel();
                self.accum(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        for j in 0..n {
                            *x += g[i * n + j];
                        }
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (j, x) in gb.iter_mut().enumerate() {
                        for i in 0..m {
                            *x -= g[i * n + j];
                        }
                    }
                });
            }
            Op::LogSumExpRows(x) => {
                let xv = self.nodes[x.0].value.clone();
                let sm = tensor::softmax_last(&xv);
                let k = xv.last_dim();
                self.accum(grads, *x, |gx| {
                    for ((gxrow, smrow), &gv) in gx.chunks_mut(k).zip(sm.data().chunks(k)).zip(g)
                    {
                        for (o, &s) in gxrow.iter_mut().zip(smrow) {
                            *o += gv * s;
                        }
                    }
                });
            }
            Op::CeWithQ { logits, q } => {
                let lv = self.nodes[logits.0].value.clone();
                let sm = tensor::softmax_last(&lv);
                let k = lv.last_dim();
                let rows = lv.numel() / k;
                let gs = g[0] / T::from_f64(rows as f64);
                self.accum(grads, *logits, |gl| {
                    for ((o, &s), &qv) in gl.iter_mut().zip(sm.data()).zip(q.data()) {
                        *o += gs * (s - qv);
                    }
                });
            }
            Op::TvLoss(images) => {
                let sh = self.nodes[images.0].value.shape().to_vec();
                let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let xv = self.nodes[images.0].value.clone();
                let src = xv.data();
                let gs = g[0];
                let two = T::from_f64(2.0);
                self.accum(grads, *images, |gi| {
                    for plane in 0..b * c {
                        let base = plane * h * w;
                        for y in 0..h {
                            for x in 0..w {
                                let v = src[base + y * w + x];
                                if y + 1 < h {
                                    let d = src[base + (y + 1) * w + x] - v;
                                    gi[base + (y + 1) * w + x] += gs * two * d;
                                    gi[base + y * w + x] -= gs * two * d;
                                }
                                if x + 1 < w {
                                    let d = src[base + y * w + x + 1] - v;
                                    gi[base + y * w + x + 1] += gs * two * d;
                                    gi[base + y * w + x] -= gs * two * d;
                                }
                            }
                        }
                    }
                });
            }
            Op::AddIntoCols { base, delta, start } => {
                self.accum(grads, *base, |gb| {
                    for (x, &gv) in gb.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
                let bd = self.nodes[base.0].value.last_dim();
                let dd = self.nodes[delta.0].value.last_dim();
                let start = *start;
                self.accum(grads, *delta, |gd| {
                    for (grow, drow) in g.chunks(bd).zip(gd.chunks_mut(dd)) {
                        for (o, &gv) in drow.iter_mut().zip(&grow[start..start + dd]) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let d = self.nodes[x.0].value.last_dim();
                let (start, len) = (*start, *len);
                self.accum(grads, *x, |gx| {
                    for (grow, xrow) in g.chunks(len).zip(gx.chunks_mut(d)) {
                        for (o, &gv) in xrow[start..start + len].iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                });
            }
        }
    }
}

/// Adjoints produced by one backward pass.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
