//! Constructive verifier for depth sharing: any depth-R stack whose layers
//! factor into a shared sub-block followed by a step-specific sub-block can be
//! replayed by a single recurrent block that carries all R specific sub-blocks
//! as selector-gated branches. This module assembles that recurrent block
//! explicitly and checks the equivalence numerically, step by step, in f64.
//!
//! Token states are widened with bookkeeping coordinates
//! `[data | step selector | counter | one | dummy flag]` and one all-zero
//! dummy token is appended. Gating is arranged so the suppressed side
//! vanishes exactly rather than approximately: gated FFN units receive a
//! large negative preactivation shift (ReLU output exactly zero), and gated
//! attention heads park their softmax mass on the dummy token via a
//! calibrated query/key bonus so large that the competing exponentials
//! underflow to 0.0. The dummy token's value vector is exactly zero, inactive
//! branches therefore contribute exact zeros, and the active path performs
//! bitwise the same arithmetic as the deep stack. The observed deviation is
//! exactly 0.0, not merely below tolerance.

use crate::rng::{stream, stream_at};
use crate::tensor::{add, add_bias, mm, Tensor, Trans};
use rand::Rng;
use std::fmt;

/// Failures of the construction or of the equivalence check.
#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    /// Selector index outside `1..=depth`.
    Step { step: usize, depth: usize },
    /// Inconsistent shapes in a stack, block, or input.
    Dim(String),
    /// A gated unit produced positive preactivation: the FFN gate constant
    /// was too small for the states actually reached.
    Calibration { step: usize, leak: f64 },
    /// Replay left the deep trajectory; `step` is the first application at
    /// which any data coordinate deviated by more than `tol`.
    Diverged {
        input: usize,
        step: usize,
        deviation: f64,
        tol: f64,
    },
    /// Selector or counter coordinates stopped matching the step schedule.
    AuxDrift { step: usize },
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Step { step, depth } => {
                write!(f, "selector step {step} outside 1..={depth}")
            }
            SimError::Dim(msg) => write!(f, "dimension mismatch: {msg}"),
            SimError::Calibration { step, leak } => write!(
                f,
                "gate constant too small: gated unit reached preactivation {leak:.3e} at step {step}"
            ),
            SimError::Diverged {
                input,
                step,
                deviation,
                tol,
            } => write!(
                f,
                "input {input} diverged at step {step}: deviation {deviation:.3e} > tol {tol:.3e}"
            ),
            SimError::AuxDrift { step } => {
                write!(f, "bookkeeping coordinates drifted at step {step}")
            }
        }
    }
}

impl std::error::Error for SimError {}

/// One attention head working on full-width states.
#[derive(Clone, Debug)]
pub struct Head {
    pub wq: Tensor<f64>,
    pub wk: Tensor<f64>,
    pub wv: Tensor<f64>,
    pub wo: Tensor<f64>,
    pub scale: f64,
}

/// Residual attention + residual ReLU FFN, the unit of composition here.
/// Either part may be empty (no heads, zero FFN width).
#[derive(Clone, Debug)]
pub struct SubBlock {
    pub dim: usize,
    pub heads: Vec<Head>,
    pub w1: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub w2: Tensor<f64>,
    pub b2: Tensor<f64>,
}

/// Intermediates recorded by one sub-block application, used for gate
/// calibration and for auditing that suppressed units stayed silent.
pub struct SubTrace {
    /// Post-attention residual state (FFN input).
    pub mid: Tensor<f64>,
    /// FFN preactivations, one column per hidden unit.
    pub pre: Tensor<f64>,
    /// Per-head scaled attention logits.
    pub scores: Vec<Tensor<f64>>,
    /// Per-head attention probabilities.
    pub att: Vec<Tensor<f64>>,
}

fn softmax_rows(s: &Tensor<f64>) -> Tensor<f64> {
    let rows = s.shape()[0];
    let cols = s.shape()[1];
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &s.data()[i * cols..(i + 1) * cols];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let e = (x - m).exp();
            out[i * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[i * cols + j] /= sum;
        }
    }
    Tensor::new(&[rows, cols], out)
}

impl SubBlock {
    /// Pure pass-through: no heads, zero-width FFN, zero bias.
    pub fn identity(dim: usize) -> Self {
        SubBlock {
            dim,
            heads: Vec::new(),
            w1: Tensor::zeros(&[dim, 0]),
            b1: Tensor::zeros(&[0]),
            w2: Tensor::zeros(&[0, dim]),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn random(
        dim: usize,
        heads: usize,
        head_dim: usize,
        ffn: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let lim = 0.5 / (dim as f64).sqrt();
        fn t(shape: &[usize], l: f64, rng: &mut impl Rng) -> Tensor<f64> {
            Tensor::from_fn(shape, |_| rng.gen_range(-l..l))
        }
        let heads = (0..heads)
            .map(|_| Head {
                wq: t(&[dim, head_dim], lim, &mut *rng),
                wk: t(&[dim, head_dim], lim, &mut *rng),
                wv: t(&[dim, head_dim], lim, &mut *rng),
                wo: t(&[head_dim, dim], lim, &mut *rng),
                scale: 1.0 / (head_dim as f64).sqrt(),
            })
            .collect();
        SubBlock {
            dim,
            heads,
            w1: t(&[dim, ffn], lim, rng),
            b1: t(&[ffn], 0.2, rng),
            w2: t(&[ffn, dim], lim, rng),
            b2: t(&[dim], 0.2, rng),
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel();
        for h in &self.heads {
            n += h.wq.numel() + h.wk.numel() + h.wv.numel() + h.wo.numel();
        }
        n
    }

    fn validate(&self, what: &str) -> Result<(), SimError> {
        let d = self.dim;
        let f = self.ffn_width();
        let ok = self.w1.shape() == [d, f]
            && self.b1.shape() == [f]
            && self.w2.shape() == [f, d]
            && self.b2.shape() == [d]
            && self.heads.iter().all(|h| {
                let p = h.wq.shape()[1];
                let v = h.wv.shape()[1];
                h.wq.shape() == [d, p]
                    && h.wk.shape() == [d, p]
                    && h.wv.shape() == [d, v]
                    && h.wo.shape() == [v, d]
            });
        if ok {
            Ok(())
        } else {
            Err(SimError::Dim(format!("{what}: inconsistent tensor shapes")))
        }
    }

    /// Applies the sub-block to `[tokens, dim]` and records intermediates.
    /// Every arithmetic step is sequential and deterministic; the replay
    /// equivalence argument leans on that.
    pub fn apply(&self, x: &Tensor<f64>) -> (Tensor<f64>, SubTrace) {
        assert_eq!(x.shape()[1], self.dim, "sub-block width mismatch");
        let mut mid = x.clone();
        let mut scores = Vec::with_capacity(self.heads.len());
        let mut att = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = mm(x, Trans::N, &h.wq, Trans::N);
            let k = mm(x, Trans::N, &h.wk, Trans::N);
            let v = mm(x, Trans::N, &h.wv, Trans::N);
            let s = crate::tensor::scale(&mm(&q, Trans::N, &k, Trans::T), h.scale);
            let p = softmax_rows(&s);
            let ctx = mm(&p, Trans::N, &v, Trans::N);
            mid = add(&mid, &mm(&ctx, Trans::N, &h.wo, Trans::N));
            scores.push(s);
            att.push(p);
        }
        let pre = add_bias(&mm(&mid, Trans::N, &self.w1, Trans::N), &self.b1);
        let hidden = pre.map(|x| if x > 0.0 { x } else { 0.0 });
        let out = add(
            &mid,
            &add_bias(&mm(&hidden, Trans::N, &self.w2, Trans::N), &self.b2),
        );
        (
            out,
            SubTrace {
                mid,
                pre,
                scores,
                att,
            },
        )
    }
}

/// Depth-R stack whose step r applies the shared sub-block, then the r-th
/// specific one. This is the network being compressed into a single loop.
#[derive(Clone, Debug)]
pub struct SharedSpecificStack {
    pub d: usize,
    pub shared: SubBlock,
    pub specific: Vec<SubBlock>,
}

impl SharedSpecificStack {
    pub fn depth(&self) -> usize {
        self.specific.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.specific.is_empty() {
            return Err(SimError::Dim("stack needs depth >= 1".into()));
        }
        if self.shared.dim != self.d {
            return Err(SimError::Dim("shared sub-block width != stack width".into()));
        }
        self.shared.validate("shared")?;
        for (j, u) in self.specific.iter().enumerate() {
            if u.dim != self.d {
                return Err(SimError::Dim(format!("specific[{j}] width != stack width")));
            }
            u.validate(&format!("specific[{j}]"))?;
        }
        Ok(())
    }

    pub fn random(
        d: usize,
        depth: usize,
        shared_heads: usize,
        specific_heads: usize,
        shared_ffn: usize,
        specific_ffn: usize,
        seed: u64,
    ) -> Self {
        let mut rng = stream(seed, "sim.stack");
        let head_dim = (d / 2).max(1);
        SharedSpecificStack {
            d,
            shared: SubBlock::random(d, shared_heads, head_dim, shared_ffn, &mut rng),
            specific: (0..depth)
                .map(|_| SubBlock::random(d, specific_heads, head_dim, specific_ffn, &mut rng))
                .collect(),
        }
    }

    /// Runs the full stack and returns all states `X^(0), ..., X^(R)`.
    pub fn run(&self, x: &Tensor<f64>) -> Result<Vec<Tensor<f64>>, SimError> {
        self.validate()?;
        if x.shape().len() != 2 || x.shape()[1] != self.d || x.shape()[0] == 0 {
            return Err(SimError::Dim(format!(
                "input shape {:?}, want [tokens>=1, {}]",
                x.shape(),
                self.d
            )));
        }
        let mut states = vec![x.clone()];
        let mut cur = x.clone();
        for u in &self.specific {
            let (y, _) = self.shared.apply(&cur);
            let (nxt, _) = u.apply(&y);
            states.push(nxt.clone());
            cur = nxt;
        }
        Ok(states)
    }
}

/// Complement one-hot code for the step about to run: entry `j` is 0.0 when
/// branch `j` is active (1-based `step` selects branch `step - 1`), 1.0
/// otherwise. After the last step the schedule advances to all ones, which
/// gates every branch off.
pub fn make_selector(step: usize, depth: usize) -> Result<Vec<f64>, SimError> {
    if step == 0 || step > depth {
        return Err(SimError::Step { step, depth });
    }
    Ok((0..depth)
        .map(|j| if j == step - 1 { 0.0 } else { 1.0 })
        .collect())
}

/// Selector expected after `apps` applications (all ones once the schedule
/// is exhausted).
fn selector_after(apps: usize, depth: usize) -> Vec<f64> {
    if apps < depth {
        make_selector(apps + 1, depth).expect("in range")
    } else {
        vec![1.0; depth]
    }
}

/// Coordinate map of the widened state: `[data | selector | counter | one |
/// dummy flag]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub data: usize,
    pub depth: usize,
}

impl Layout {
    pub fn sel(&self, j: usize) -> usize {
        self.data + j
    }
    pub fn counter(&self) -> usize {
        self.data + self.depth
    }
    pub fn one(&self) -> usize {
        self.data + self.depth + 1
    }
    pub fn flag(&self) -> usize {
        self.data + self.depth + 2
    }
    pub fn width(&self) -> usize {
        self.data + self.depth + 3
    }
}

/// Widened token state: the original tokens plus bookkeeping coordinates and
/// one trailing dummy token that serves as the parking spot for gated
/// attention heads.
#[derive(Clone, Debug)]
pub struct AugmentedState {
    pub z: Tensor<f64>,
    pub layout: Layout,
}

/// Widens `[tokens, d]` data for a depth-`depth` schedule, starting at step 1.
pub fn augment(x: &Tensor<f64>, depth: usize) -> Result<AugmentedState, SimError> {
    if x.shape().len() != 2 || x.shape()[0] == 0 {
        return Err(SimError::Dim(format!(
            "augment wants [tokens>=1, d], got {:?}",
            x.shape()
        )));
    }
    if depth == 0 {
        return Err(SimError::Dim("augment wants depth >= 1".into()));
    }
    let tokens = x.shape()[0];
    let d = x.shape()[1];
    let lay = Layout { data: d, depth };
    let w = lay.width();
    let mut z = vec![0.0; (tokens + 1) * w];
    let sel = make_selector(1, depth)?;
    for i in 0..tokens {
        for c in 0..d {
            z[i * w + c] = x.data()[i * d + c];
        }
        for (j, &s) in sel.iter().enumerate() {
            z[i * w + lay.sel(j)] = s;
        }
        z[i * w + lay.counter()] = 1.0;
        z[i * w + lay.one()] = 1.0;
    }
    // Dummy token: zero data, zero selector, one = 1, flag = 1.
    z[tokens * w + lay.one()] = 1.0;
    z[tokens * w + lay.flag()] = 1.0;
    Ok(AugmentedState {
        z: Tensor::new(&[tokens + 1, w], z),
        layout: lay,
    })
}

impl AugmentedState {
    /// Number of real tokens (the trailing dummy excluded).
    pub fn tokens(&self) -> usize {
        self.z.shape()[0] - 1
    }

    /// Data coordinates of the real tokens, `[tokens, d]`.
    pub fn data(&self) -> Tensor<f64> {
        let t = self.tokens();
        let d = self.layout.data;
        let w = self.layout.width();
        Tensor::from_fn(&[t, d], |i| self.z.data()[(i / d) * w + i % d])
    }

    /// Selector coordinates of the first real token.
    pub fn selector(&self) -> Vec<f64> {
        (0..self.layout.depth)
            .map(|j| self.z.data()[self.layout.sel(j)])
            .collect()
    }

    /// Counter coordinate of the first real token.
    pub fn counter(&self) -> f64 {
        self.z.data()[self.layout.counter()]
    }

    /// Index of the branch the selector marks active, if exactly encoded.
    pub fn active_branch(&self) -> Option<usize> {
        self.selector().iter().position(|&s| s == 0.0)
    }

    /// Largest |data coordinate| of the dummy token (exactly 0.0 when the
    /// construction is intact).
    pub fn dummy_data_max(&self) -> f64 {
        let w = self.layout.width();
        let t = self.tokens();
        (0..self.layout.data)
            .map(|c| self.z.data()[t * w + c].abs())
            .fold(0.0, f64::max)
    }
}

/// Gate constants, sized from the states a calibration run actually reaches.
#[derive(Clone, Copy, Debug)]
pub struct Calibration {
    /// Negative preactivation shift for gated FFN units; twice the largest
    /// magnitude any unit reaches (cross branches included), floor 1.0.
    pub ffn_gate: f64,
    /// Query/key bonus steering gated heads onto the dummy token. Sized so
    /// every suppressed exponential is exp(x) with x < -800, which underflows
    /// to exactly 0.0 in f64.
    pub attn_gate: f64,
}

/// Measures preactivation and attention-logit ranges over `inputs`, including
/// every inactive branch against every intermediate state it would see inside
/// the loop, and returns gates with a 2x safety margin.
pub fn calibrate(
    stack: &SharedSpecificStack,
    inputs: &[Tensor<f64>],
) -> Result<Calibration, SimError> {
    stack.validate()?;
    let mut pre_max = 1.0f64;
    let mut score_max = 1.0f64;
    fn absorb(tr: &SubTrace, pre_max: &mut f64, score_max: &mut f64) {
        for &v in tr.pre.data() {
            *pre_max = pre_max.max(v.abs());
        }
        for s in &tr.scores {
            for &v in s.data() {
                *score_max = score_max.max(v.abs());
            }
        }
    }
    // Dummy-token preactivations reduce to the bias alone.
    for sub in std::iter::once(&stack.shared).chain(stack.specific.iter()) {
        for &v in sub.b1.data() {
            pre_max = pre_max.max(v.abs());
        }
    }
    for x in inputs {
        if x.shape().len() != 2 || x.shape()[1] != stack.d {
            return Err(SimError::Dim(format!(
                "calibration input shape {:?}, want [tokens, {}]",
                x.shape(),
                stack.d
            )));
        }
        let mut cur = x.clone();
        for (r, active) in stack.specific.iter().enumerate() {
            let (y, tr_s) = stack.shared.apply(&cur);
            absorb(&tr_s, &mut pre_max, &mut score_max);
            let (nxt, tr_u) = active.apply(&y);
            absorb(&tr_u, &mut pre_max, &mut score_max);
            // Inactive branches see the same post-attention state (their own
            // attention writes nothing) and the same attention input y.
            for (j, u) in stack.specific.iter().enumerate() {
                if j == r {
                    continue;
                }
                let pre = add_bias(&mm(&tr_u.mid, Trans::N, &u.w1, Trans::N), &u.b1);
                for &v in pre.data() {
                    pre_max = pre_max.max(v.abs());
                }
                for h in &u.heads {
                    let q = mm(&y, Trans::N, &h.wq, Trans::N);
                    let k = mm(&y, Trans::N, &h.wk, Trans::N);
                    let s = crate::tensor::scale(&mm(&q, Trans::N, &k, Trans::T), h.scale);
                    for &v in s.data() {
                        score_max = score_max.max(v.abs());
                    }
                }
            }
            cur = nxt;
        }
    }
    Ok(Calibration {
        ffn_gate: 2.0 * pre_max,
        // exp underflows to 0.0 below roughly -746; every gated exponent ends
        // up at most score_max - attn_gate - 2*score_max < -808.
        attn_gate: 808.0 + 4.0 * score_max,
    })
}

/// Public widths of the assembled recurrent block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoopedBlockSpec {
    pub data_dim: usize,
    pub depth: usize,
    /// Widened state dimension: data + depth + 3.
    pub dim: usize,
    /// Total FFN hidden units across both stages.
    pub ffn_width: usize,
    /// Total attention heads across both stages.
    pub heads: usize,
}

/// The single recurrent block: a lifted copy of the shared sub-block, then a
/// bank stage holding every specific sub-block as a gated branch plus the
/// bookkeeping units that advance the selector and counter.
#[derive(Clone, Debug)]
pub struct LoopedBlock {
    pub spec: LoopedBlockSpec,
    pub layout: Layout,
    pub stage1: SubBlock,
    pub stage2: SubBlock,
    /// Hidden-unit ranges of each branch in the bank FFN.
    pub branch_cols: Vec<(usize, usize)>,
    /// First carrier unit (branch j's output bias rides on carrier j).
    pub carriers: usize,
    /// First selector-advance unit (two per branch).
    pub advance: usize,
    /// Counter increment unit.
    pub counter_unit: usize,
    /// Owning branch of each bank-stage head.
    pub head_branch: Vec<usize>,
}

/// Lifts a head to the widened layout. `branch` gates it onto the dummy
/// token whenever that branch's selector entry is 1; `None` (shared stage)
/// leaves real queries on the real keys. The extra query/key channel scores
/// -gate for live queries against the dummy key and +gate (or more) for
/// parked ones, so after scaling the suppressed exponentials underflow.
fn lift_head(h: &Head, lay: &Layout, branch: Option<usize>, gate: f64) -> Head {
    let d = lay.data;
    let w = lay.width();
    let p = h.wq.shape()[1];
    let v = h.wv.shape()[1];
    let beta = gate / h.scale;
    let mut wq = vec![0.0; w * (p + 1)];
    let mut wk = vec![0.0; w * (p + 1)];
    let mut wv = vec![0.0; w * v];
    let mut wo = vec![0.0; v * w];
    for r in 0..d {
        for c in 0..p {
            wq[r * (p + 1) + c] = h.wq.data()[r * p + c];
            wk[r * (p + 1) + c] = h.wk.data()[r * p + c];
        }
        for c in 0..v {
            wv[r * v + c] = h.wv.data()[r * v + c];
        }
    }
    for r in 0..v {
        for c in 0..d {
            wo[r * w + c] = h.wo.data()[r * d + c];
        }
    }
    // Query bonus channel: -beta for live tokens, +beta or more for parked
    // and dummy ones. Key channel: 1 on the dummy token only.
    wq[lay.one() * (p + 1) + p] = -beta;
    wq[lay.flag() * (p + 1) + p] = 2.0 * beta;
    if let Some(j) = branch {
        wq[lay.sel(j) * (p + 1) + p] = 2.0 * beta;
    }
    wk[lay.flag() * (p + 1) + p] = 1.0;
    Head {
        wq: Tensor::new(&[w, p + 1], wq),
        wk: Tensor::new(&[w, p + 1], wk),
        wv: Tensor::new(&[w, v], wv),
        wo: Tensor::new(&[v, w], wo),
        scale: h.scale,
    }
}

/// Builds the recurrent block realizing `stack` under the given gates.
pub fn build_looped_block(
    stack: &SharedSpecificStack,
    calib: &Calibration,
) -> Result<LoopedBlock, SimError> {
    stack.validate()?;
    let d = stack.d;
    let depth = stack.depth();
    let lay = Layout { data: d, depth };
    let w = lay.width();
    let c = calib.ffn_gate;

    // Stage 1: the shared sub-block, silenced on the dummy token, with one
    // carrier unit relu(one - flag) delivering its output bias to real tokens.
    let s = &stack.shared;
    let f_s = s.ffn_width();
    let f1 = f_s + 1;
    let mut w1 = vec![0.0; w * f1];
    let mut b1 = vec![0.0; f1];
    let mut w2 = vec![0.0; f1 * w];
    for r in 0..d {
        for col in 0..f_s {
            w1[r * f1 + col] = s.w1.data()[r * f_s + col];
        }
    }
    for col in 0..f_s {
        w1[lay.flag() * f1 + col] = -c;
        b1[col] = s.b1.data()[col];
        for cc in 0..d {
            w2[col * w + cc] = s.w2.data()[col * d + cc];
        }
    }
    w1[lay.one() * f1 + f_s] = 1.0;
    w1[lay.flag() * f1 + f_s] = -1.0;
    for cc in 0..d {
        w2[f_s * w + cc] = s.b2.data()[cc];
    }
    let stage1 = SubBlock {
        dim: w,
        heads: s
            .heads
            .iter()
            .map(|h| lift_head(h, &lay, None, calib.attn_gate))
            .collect(),
        w1: Tensor::new(&[w, f1], w1),
        b1: Tensor::new(&[f1], b1),
        w2: Tensor::new(&[f1, w], w2),
        b2: Tensor::zeros(&[w]),
    };

    // Stage 2: the branch bank. Hidden layout per branch j: its FFN units
    // (gated by selector j and the dummy flag), then depth carrier units,
    // then two selector-advance units per branch, then the counter unit.
    let sum_f: usize = stack.specific.iter().map(|u| u.ffn_width()).sum();
    let carriers = sum_f;
    let advance = sum_f + depth;
    let counter_unit = sum_f + 3 * depth;
    let f2 = sum_f + 3 * depth + 1;
    let mut w1 = vec![0.0; w * f2];
    let mut b1 = vec![0.0; f2];
    let mut w2 = vec![0.0; f2 * w];
    let mut branch_cols = Vec::with_capacity(depth);
    let mut head_branch = Vec::new();
    let mut heads = Vec::new();
    let mut col0 = 0usize;
    for (j, u) in stack.specific.iter().enumerate() {
        let f_u = u.ffn_width();
        branch_cols.push((col0, col0 + f_u));
        for r in 0..d {
            for col in 0..f_u {
                w1[r * f2 + col0 + col] = u.w1.data()[r * f_u + col];
            }
        }
        for col in 0..f_u {
            w1[lay.sel(j) * f2 + col0 + col] = -c;
            w1[lay.flag() * f2 + col0 + col] = -c;
            b1[col0 + col] = u.b1.data()[col];
            for cc in 0..d {
                w2[(col0 + col) * w + cc] = u.w2.data()[col * d + cc];
            }
        }
        // Carrier j: relu(one - sel_j - flag) = 1 exactly when branch j is
        // live on a real token; delivers the branch's output bias.
        let cj = carriers + j;
        w1[lay.one() * f2 + cj] = 1.0;
        w1[lay.sel(j) * f2 + cj] = -1.0;
        w1[lay.flag() * f2 + cj] = -1.0;
        for cc in 0..d {
            w2[cj * w + cc] = u.b2.data()[cc];
        }
        // Selector advance, two units per coordinate: after serving, entry j
        // returns to 1 while entry j+1 drops to 0; entry 0 starts served.
        // delta_0 = relu(one - sel_0), delta_j = relu(sel_{j-1} - sel_j) side
        // minus relu(sel_j - sel_{j-1}); values stay exactly in {0, 1}.
        let up = advance + 2 * j;
        let dn = advance + 2 * j + 1;
        if j == 0 {
            w1[lay.one() * f2 + up] = 1.0;
            w1[lay.sel(0) * f2 + up] = -1.0;
            w1[lay.sel(0) * f2 + dn] = 1.0;
            w1[lay.one() * f2 + dn] = -1.0;
        } else {
            w1[lay.sel(j - 1) * f2 + up] = 1.0;
            w1[lay.sel(j) * f2 + up] = -1.0;
            w1[lay.sel(j) * f2 + dn] = 1.0;
            w1[lay.sel(j - 1) * f2 + dn] = -1.0;
        }
        w2[up * w + lay.sel(j)] = 1.0;
        w2[dn * w + lay.sel(j)] = -1.0;
        for h in &u.heads {
            heads.push(lift_head(h, &lay, Some(j), calib.attn_gate));
            head_branch.push(j);
        }
        col0 += f_u;
    }
    // Counter: relu(one) increments the step odometer on every application.
    w1[lay.one() * f2 + counter_unit] = 1.0;
    w2[counter_unit * w + lay.counter()] = 1.0;
    let stage2 = SubBlock {
        dim: w,
        heads,
        w1: Tensor::new(&[w, f2], w1),
        b1: Tensor::new(&[f2], b1),
        w2: Tensor::new(&[f2, w], w2),
        b2: Tensor::zeros(&[w]),
    };

    let spec = LoopedBlockSpec {
        data_dim: d,
        depth,
        dim: w,
        ffn_width: f1 + f2,
        heads: stage1.heads.len() + stage2.heads.len(),
    };
    Ok(LoopedBlock {
        spec,
        layout: lay,
        stage1,
        stage2,
        branch_cols,
        carriers,
        advance,
        counter_unit,
        head_branch,
    })
}

/// Silence audit for one application: the largest positive preactivation any
/// gated unit reached (0.0 when fully silent) and the smallest softmax mass a
/// gated head put on the dummy token (1.0 when nothing was gated).
#[derive(Clone, Copy, Debug)]
pub struct StepAudit {
    pub active: Option<usize>,
    pub leak: f64,
    pub min_inactive_dummy_mass: f64,
}

impl LoopedBlock {
    /// w2 row carrying branch `j`'s output bias; a handy fault-injection
    /// point because it only fires on that branch's own step.
    pub fn carrier_row(&self, j: usize) -> usize {
        self.carriers + j
    }

    /// One recurrent application with a silence audit.
    pub fn apply(&self, state: &AugmentedState) -> Result<(AugmentedState, StepAudit), SimError> {
        if state.layout != self.layout {
            return Err(SimError::Dim("state layout differs from block layout".into()));
        }
        let active = state.active_branch();
        let (z1, tr1) = self.stage1.apply(&state.z);
        let (z2, tr2) = self.stage2.apply(&z1);
        let tokens = state.tokens();
        let mut leak = 0.0f64;
        // Dummy-token silence: every stage-1 unit and every bank branch or
        // carrier unit must be at or below zero on the dummy row.
        let f1 = self.stage1.ffn_width();
        for col in 0..f1 {
            leak = leak.max(tr1.pre.data()[tokens * f1 + col]);
        }
        let f2 = self.stage2.ffn_width();
        for &(s, e) in &self.branch_cols {
            for col in s..e {
                leak = leak.max(tr2.pre.data()[tokens * f2 + col]);
            }
        }
        for j in 0..self.spec.depth {
            leak = leak.max(tr2.pre.data()[tokens * f2 + self.carriers + j]);
        }
        // Inactive-branch silence on real tokens.
        for (j, &(s, e)) in self.branch_cols.iter().enumerate() {
            if Some(j) == active {
                continue;
            }
            for i in 0..tokens {
                for col in s..e {
                    leak = leak.max(tr2.pre.data()[i * f2 + col]);
                }
            }
        }
        // Gated heads must park all real-token mass on the dummy column.
        let mut min_mass = 1.0f64;
        let cols = tokens + 1;
        for (h, &j) in self.head_branch.iter().enumerate() {
            if Some(j) == active {
                continue;
            }
            for i in 0..tokens {
                min_mass = min_mass.min(tr2.att[h].data()[i * cols + tokens]);
            }
        }
        Ok((
            AugmentedState {
                z: z2,
                layout: self.layout,
            },
            StepAudit {
                active,
                leak,
                min_inactive_dummy_mass: min_mass,
            },
        ))
    }
}

/// Outcome of a full equivalence check.
#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub checked_inputs: usize,
    /// Total block applications audited (inputs x depth).
    pub checked_steps: usize,
    pub max_deviation: f64,
    /// Worst deviation after each step, across inputs.
    pub per_step: Vec<f64>,
    /// Largest |data coordinate| the dummy token ever showed.
    pub dummy_max_abs: f64,
    /// Smallest dummy-token mass any gated head produced.
    pub min_inactive_dummy_mass: f64,
}

/// Replays every input through the recurrent block and compares the data
/// coordinates against the deep stack after every step, not just the last.
/// Inputs must come from the regime the gates were calibrated on.
pub fn verify_equivalence(
    stack: &SharedSpecificStack,
    looped: &LoopedBlock,
    inputs: &[Tensor<f64>],
    tol: f64,
) -> Result<VerifyReport, SimError> {
    let depth = stack.depth();
    if looped.spec.data_dim != stack.d || looped.spec.depth != depth {
        return Err(SimError::Dim("block was built for a different stack".into()));
    }
    let mut report = VerifyReport {
        checked_inputs: inputs.len(),
        checked_steps: 0,
        max_deviation: 0.0,
        per_step: vec![0.0; depth],
        dummy_max_abs: 0.0,
        min_inactive_dummy_mass: 1.0,
    };
    for (idx, x) in inputs.iter().enumerate() {
        let states = stack.run(x)?;
        let mut z = augment(x, depth)?;
        for r in 1..=depth {
            let (nxt, audit) = looped.apply(&z)?;
            z = nxt;
            if audit.leak > 0.0 {
                return Err(SimError::Calibration {
                    step: r,
                    leak: audit.leak,
                });
            }
            report.min_inactive_dummy_mass =
                report.min_inactive_dummy_mass.min(audit.min_inactive_dummy_mass);
            report.dummy_max_abs = report.dummy_max_abs.max(z.dummy_data_max());
            // Bookkeeping must track the schedule exactly.
            if z.selector() != selector_after(r, depth) || z.counter() != (r + 1) as f64 {
                return Err(SimError::AuxDrift { step: r });
            }
            let got = z.data();
            let want = &states[r];
            let mut dev = 0.0f64;
            for (a, b) in got.data().iter().zip(want.data().iter()) {
                dev = dev.max((a - b).abs());
            }
            if dev > tol {
                return Err(SimError::Diverged {
                    input: idx,
                    step: r,
                    deviation: dev,
                    tol,
                });
            }
            report.per_step[r - 1] = report.per_step[r - 1].max(dev);
            report.max_deviation = report.max_deviation.max(dev);
            report.checked_steps += 1;
        }
    }
    Ok(report)
}

/// Parameter tally: the deep stack stores a fresh copy of the shared
/// sub-block at every step; the loop stores it once plus the bank and the
/// bookkeeping overhead of the widened state.
#[derive(Clone, Copy, Debug)]
pub struct SizeReport {
    pub deep_params: usize,
    pub looped_params: usize,
    /// looped / deep.
    pub ratio: f64,
}

pub fn size_accounting(stack: &SharedSpecificStack, looped: &LoopedBlock) -> SizeReport {
    let shared = stack.shared.param_count();
    let deep: usize = stack
        .specific
        .iter()
        .map(|u| shared + u.param_count())
        .sum();
    let lp = looped.stage1.param_count() + looped.stage2.param_count();
    SizeReport {
        deep_params: deep,
        looped_params: lp,
        ratio: lp as f64 / deep as f64,
    }
}

/// Randomized sweep settings.
#[derive(Clone, Copy, Debug)]
pub struct TrialConfig {
    pub trials: usize,
    pub d_max: usize,
    pub r_max: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            trials: 100,
            d_max: 16,
            r_max: 4,
            tol: 1e-9,
            seed: 7,
        }
    }
}

/// One sweep row: the sampled stack shape, the widths the construction
/// needed, and the worst deviation it produced.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub d: usize,
    pub depth: usize,
    pub tokens: usize,
    pub looped_dim: usize,
    pub looped_ffn: usize,
    pub looped_heads: usize,
    pub max_deviation: f64,
    pub passed: bool,
}

pub fn trial_csv_header() -> &'static str {
    "trial,dim,depth,tokens,looped_dim,looped_ffn,looped_heads,max_dev,pass"
}

pub fn trial_csv_line(row: &TrialRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{:.3e},{}",
        row.trial,
        row.d,
        row.depth,
        row.tokens,
        row.looped_dim,
        row.looped_ffn,
        row.looped_heads,
        row.max_deviation,
        row.passed
    )
}

/// Runs `trials` random stacks end to end: sample, calibrate, build, verify.
/// Returns the rows and the worst deviation seen anywhere. Fails fast on the
/// first construction that breaks.
pub fn run_trials(cfg: &TrialConfig) -> Result<(Vec<TrialRow>, f64), SimError> {
    let mut rows = Vec::with_capacity(cfg.trials);
    let mut worst = 0.0f64;
    for t in 0..cfg.trials {
        let mut rng = stream_at(cfg.seed, "sim.trial", t as u64);
        let d = rng.gen_range(2..=cfg.d_max.max(2));
        let depth = rng.gen_range(1..=cfg.r_max.max(1));
        let tokens = rng.gen_range(2..=6);
        let h_s = rng.gen_range(0..=2);
        let h_u = rng.gen_range(0..=2);
        let f_s = rng.gen_range(0..=10);
        let f_u = rng.gen_range(0..=5);
        let stack = SharedSpecificStack::random(d, depth, h_s, h_u, f_s, f_u, cfg.seed ^ t as u64);
        let inputs: Vec<Tensor<f64>> = (0..2)
            .map(|_| Tensor::from_fn(&[tokens, d], |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let calib = calibrate(&stack, &inputs)?;
        let looped = build_looped_block(&stack, &calib)?;
        let report = verify_equivalence(&stack, &looped, &inputs, cfg.tol)?;
        worst = worst.max(report.max_deviation);
        rows.push(TrialRow {
            trial: t,
            d,
            depth,
            tokens,
            looped_dim: looped.spec.dim,
            looped_ffn: looped.spec.ffn_width,
            looped_heads: looped.spec.heads,
            max_deviation: report.max_deviation,
            passed: true,
        });
    }
    Ok((rows, worst))
}
