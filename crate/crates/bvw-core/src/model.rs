//! The model family: patch embedding, pre-norm transformer blocks, the
//! blocks x steps recurrent forward with its variants, classifier heads, and
//! exact parameter / FLOP accounting.
//!
//! One architecture covers the whole design space: `blocks` distinct blocks
//! applied in order, the whole sequence looped `steps` times. blocks=12,
//! steps=1 is a conventional depth-12 encoder; blocks=1, steps=12 is the
//! single shared block applied twelve times. Variants add per-step inputs
//! (time embeddings), extra scratch tokens (registers), or an auxiliary
//! latent path (`fl`, `sc`).

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{Config, ConfigError};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, Trans};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("non-finite activations after block application {application} (step {step})")]
    NonFinite { application: usize, step: usize },
    #[error(transparent)]
    ConfigParse(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Auxiliary-path variants of the recurrent forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Plain recurrence.
    Base,
    /// Learned per-step embedding added to every token before each loop.
    Te,
    /// Inner feedback latent: y_j = G(y_{j-1} + x) run n times per step,
    /// then x' = F(x + TE_t + y_n). G is the block's residual increment.
    Fl { n: usize, tied: bool },
    /// Slow memory: y = G(x_t) refreshed when t % n == 0,
    /// then x' = F(x + TE_t + y).
    Sc { n: usize, tied: bool },
}

impl Variant {
    pub fn uses_te(self) -> bool {
        !matches!(self, Variant::Base)
    }

    fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Te => "te",
            Variant::Fl { .. } => "fl",
            Variant::Sc { .. } => "sc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub steps: usize,
    pub patch: usize,
    pub image: usize,
    pub channels: usize,
    pub classes: usize,
    pub ffn_ratio: usize,
    pub variant: Variant,
    pub registers: usize,
    pub distill: bool,
    pub eps: f64,
}

impl ModelConfig {
    /// Small sensible baseline; adjust fields as needed.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 128,
            heads: 4,
            blocks: 1,
            steps: 6,
            patch: 4,
            image: 32,
            channels: 3,
            classes: 10,
            ffn_ratio: 4,
            variant: Variant::Base,
            registers: 0,
            distill: false,
            eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(ModelError::Config("blocks must be >= 1".into()));
        }
        if self.image % self.patch != 0 {
            return Err(ModelError::Config(format!(
                "image {} not divisible by patch {}",
                self.image, self.patch
            )));
        }
        match self.variant {
            Variant::Fl { n, .. } | Variant::Sc { n, .. } => {
                if n == 0 {
                    return Err(ModelError::Config("fl_n / sc_n must be >= 1".into()));
                }
                if self.blocks != 1 {
                    return Err(ModelError::Config(
                        "fl / sc variants require blocks = 1".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image / self.patch) * (self.image / self.patch)
    }

    /// Tokens: class token, optional distillation token, registers, patches.
    pub fn tokens(&self) -> usize {
        1 + usize::from(self.distill) + self.registers + self.patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_ratio * self.embed_dim
    }

    /// Token index of the distillation token (directly after the class token).
    pub fn distill_index(&self) -> usize {
        1
    }

    const KEYS: &'static [&'static str] = &[
        "embed_dim", "heads", "blocks", "steps", "patch", "image", "channels", "classes",
        "ffn_ratio", "variant", "registers", "fl_n", "sc_n", "tied", "distill", "eps",
    ];

    pub fn from_config(cfg: &Config) -> Result<Self, ModelError> {
        cfg.reject_unknown(Self::KEYS)?;
        let tied = cfg.bool_or("tied", true)?;
        let variant = match cfg.str_or("variant", "base") {
            "base" => Variant::Base,
            "te" => Variant::Te,
            "fl" => Variant::Fl {
                n: cfg.usize_or("fl_n", 1)?,
                tied,
            },
            "sc" => Variant::Sc {
                n: cfg.usize_or("sc_n", 1)?,
                tied,
            },
            other => {
                return Err(ModelError::Config(format!(
                    "unknown variant {other:?} (expected base|te|fl|sc)"
                )))
            }
        };
        let mc = ModelConfig {
            embed_dim: cfg.usize("embed_dim")?,
            heads: cfg.usize("heads")?,
            blocks: cfg.usize_or("blocks", 1)?,
            steps: cfg.usize("steps")?,
            patch: cfg.usize("patch")?,
            image: cfg.usize("image")?,
            channels: cfg.usize_or("channels", 3)?,
            classes: cfg.usize("classes")?,
            ffn_ratio: cfg.usize_or("ffn_ratio", 4)?,
            variant,
            registers: cfg.usize_or("registers", 0)?,
            distill: cfg.bool_or("distill", false)?,
            eps: cfg.f64_or("eps", 1e-6)?,
        };
        mc.validate()?;
        Ok(mc)
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::new();
        let mut set = |k: &str, v: String| c.set(k, &v);
        set("embed_dim", self.embed_dim.to_string());
        set("heads", self.heads.to_string());
        set("blocks", self.blocks.to_string());
        set("steps", self.steps.to_string());
        set("patch", self.patch.to_string());
        set("image", self.image.to_string());
        set("channels", self.channels.to_string());
        set("classes", self.classes.to_string());
        set("ffn_ratio", self.ffn_ratio.to_string());
        set("variant", self.variant.name().to_string());
        set("registers", self.registers.to_string());
        match self.variant {
            Variant::Fl { n, tied } => {
                set("fl_n", n.to_string());
                set("tied", tied.to_string());
            }
            Variant::Sc { n, tied } => {
                set("sc_n", n.to_string());
                set("tied", tied.to_string());
            }
            _ => {}
        }
        set("distill", self.distill.to_string());
        set("eps", self.eps.to_string());
        c
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Named parameter store with stable iteration order.
#[derive(Clone)]
pub struct Params<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name:?}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &mut self.tensors[i]
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) {
        let cur = self.get_mut(name);
        assert_eq!(cur.shape(), t.shape(), "shape change for {name:?}");
        *cur = t;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn total_values(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    pub fn convert<U: Scalar>(&self) -> Params<U> {
        let mut out = Params::new();
        for (n, t) in self.iter() {
            out.insert(n, t.convert());
        }
        out
    }
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape leaves for one forward pass, one per parameter.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: HashMap<String, Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

/// The weight tensors one block application consumes.
#[derive(Clone, Copy)]
pub struct BlockVars {
    pub norm1_g: Var,
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub norm2_g: Var,
    pub ffn_in_w: Var,
    pub ffn_in_b: Var,
    pub ffn_out_w: Var,
    pub ffn_out_b: Var,
}

/// Rewrites block weights for one application. Receives the bound parameters
/// (so rewrites can pull extra trainable leaves, e.g. low-rank adapters) and
/// the application index so per-step transforms can differ across the loop.
pub type WeightHook<'a, T> = dyn Fn(&mut Tape<T>, &Bound, usize, &BlockVars) -> BlockVars + 'a;

#[derive(Default, Clone, Copy)]
pub struct ForwardOpts {
    /// Record token state after every block application.
    pub trace: bool,
    /// Record attention probabilities [B*H, T, T] for every application.
    pub attn: bool,
    /// Record post-activation FFN hidden states [B*T, ffn_dim].
    pub ffn: bool,
}

pub struct ForwardOut {
    /// Token state after the full recurrence, [B, T, d].
    pub tokens: Var,
    /// Token states after each block application (empty unless requested).
    pub trace: Vec<Var>,
    /// Attention probabilities per application (empty unless requested).
    pub attn: Vec<Var>,
    /// FFN hidden states per application (empty unless requested). Pushed at
    /// the same points as `trace`, so the two vectors index identically.
    pub ffn: Vec<Var>,
    /// Number of block applications executed (F and G both count).
    pub applications: usize,
}

/// Intermediate signals of a single block application.
pub struct BlockOut {
    /// Output token state [B, T, d].
    pub tokens: Var,
    /// Attention probabilities [B*H, T, T].
    pub att: Var,
    /// Post-activation FFN hidden state [B*T, ffn_dim].
    pub ffn_hidden: Var,
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: Params<T>,
}

pub(crate) fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, r: &mut impl Rng) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            // Resample outside two standard deviations.
            loop {
                let z: f64 = StandardNormal.sample(r);
                if z.abs() <= 2.0 {
                    return T::from_f64(z * std);
                }
            }
        })
        .collect();
    Tensor::new(shape, data)
}

impl<T: Scalar> Model<T> {
    /// Fresh model, every tensor drawn from its own named RNG stream.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = Params::new();
        let d = cfg.embed_dim;
        let std = 0.02;
        let w = |name: &str, shape: &[usize]| {
            Tensor::<T>::convert(&trunc_normal::<T>(shape, std, &mut stream(seed, name)))
        };
        params.insert("embed.proj.w", w("embed.proj.w", &[cfg.channels * cfg.patch * cfg.patch, d]));
        params.insert("embed.proj.b", Tensor::zeros(&[d]));
        params.insert("embed.cls", w("embed.cls", &[1, d]));
        if cfg.distill {
            params.insert("embed.dist", w("embed.dist", &[1, d]));
        }
        if cfg.registers > 0 {
            params.insert("embed.reg", w("embed.reg", &[cfg.registers, d]));
        }
        params.insert("embed.pos", w("embed.pos", &[cfg.tokens(), d]));
        if cfg.variant.uses_te() {
            params.insert("embed.te", w("embed.te", &[cfg.steps, d]));
        }
        let block = |params: &mut Params<T>, prefix: &str| {
            let names = [
                ("norm1.g", vec![d]),
                ("attn.qkv.w", vec![d, 3 * d]),
                ("attn.qkv.b", vec![3 * d]),
                ("attn.proj.w", vec![d, d]),
                ("attn.proj.b", vec![d]),
                ("norm2.g", vec![d]),
                ("ffn.in.w", vec![d, cfg.ffn_dim()]),
                ("ffn.in.b", vec![cfg.ffn_dim()]),
                ("ffn.out.w", vec![cfg.ffn_dim(), d]),
                ("ffn.out.b", vec![d]),
            ];
            for (suffix, shape) in names {
                let full = format!("{prefix}.{suffix}");
                let t = if suffix.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else if suffix.ends_with(".g") {
                    Tensor::full(&shape, T::ONE)
                } else {
                    Tensor::convert(&trunc_normal::<T>(&shape, std, &mut stream(seed, &full)))
                };
                params.insert(&full, t);
            }
        };
        for b in 0..cfg.blocks {
            block(&mut params, &format!("block{b}"));
        }
        if let Variant::Fl { tied: false, .. } | Variant::Sc { tied: false, .. } = cfg.variant {
            block(&mut params, "gblock0");
        }
        params.insert("final_norm.g", Tensor::full(&[d], T::ONE));
        params.insert("head.w", w("head.w", &[d, cfg.classes]));
        params.insert("head.b", Tensor::zeros(&[cfg.classes]));
        if cfg.distill {
            params.insert("head_dist.w", w("head_dist.w", &[d, cfg.classes]));
            params.insert("head_dist.b", Tensor::zeros(&[cfg.classes]));
        }
        Ok(Model { cfg, params })
    }

    /// Bind every parameter as a tape leaf; `trainable` selects which leaves
    /// request gradients (all when None).
    pub fn bind(&self, tape: &mut Tape<T>, trainable: Option<&dyn Fn(&str) -> bool>) -> Bound {
        let mut vars = HashMap::new();
        for (name, t) in self.params.iter() {
            let train = trainable.map_or(true, |f| f(name));
            vars.insert(name.to_string(), tape.leaf(t.clone(), train));
        }
        Bound { vars }
    }

    pub fn block_vars(&self, bound: &Bound, prefix: &str) -> BlockVars {
        let v = |s: &str| bound.var(&format!("{prefix}.{s}"));
        BlockVars {
            norm1_g: v("norm1.g"),
            qkv_w: v("attn.qkv.w"),
            qkv_b: v("attn.qkv.b"),
            proj_w: v("attn.proj.w"),
            proj_b: v("attn.proj.b"),
            norm2_g: v("norm2.g"),
            ffn_in_w: v("ffn.in.w"),
            ffn_in_b: v("ffn.in.b"),
            ffn_out_w: v("ffn.out.w"),
            ffn_out_b: v("ffn.out.b"),
        }
    }

    /// One pre-norm block application on [B, T, d].
    pub fn block_apply(&self, tape: &mut Tape<T>, x: Var, w: &BlockVars) -> BlockOut {
        let sh = tape.value(x).shape().to_vec();
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        let eps = T::from_f64(self.cfg.eps);
        let heads = self.cfg.heads;
        let scale = T::from_f64(1.0 / (self.cfg.head_dim() as f64).sqrt());

        let h = tape.rmsnorm(x, w.norm1_g, eps);
        let h2 = tape.reshape(h, &[b * t, d]);
        let qkv = tape.mm(h2, Trans::N, w.qkv_w, Trans::N);
        let qkv = tape.add_bias(qkv, w.qkv_b);
        let q = tape.slice_cols(qkv, 0, d);
        let k = tape.slice_cols(qkv, d, d);
        let v = tape.slice_cols(qkv, 2 * d, d);
        let q = tape.reshape(q, &[b, t, d]);
        let k = tape.reshape(k, &[b, t, d]);
        let v = tape.reshape(v, &[b, t, d]);
        let qh = tape.split_heads(q, heads);
        let kh = tape.split_heads(k, heads);
        let vh = tape.split_heads(v, heads);
        let scores = tape.bmm(qh, Trans::N, kh, Trans::T);
        let scores = tape.scale(scores, scale);
        let att = tape.softmax(scores);
        let ctx = tape.bmm(att, Trans::N, vh, Trans::N);
        let ctx = tape.merge_heads(ctx, heads);
        let ctx2 = tape.reshape(ctx, &[b * t, d]);
        let o = tape.mm(ctx2, Trans::N, w.proj_w, Trans::N);
        let o = tape.add_bias(o, w.proj_b);
        let o = tape.reshape(o, &[b, t, d]);
        let mid = tape.add(x, o);

        let h3 = tape.rmsnorm(mid, w.norm2_g, eps);
        let h3 = tape.reshape(h3, &[b * t, d]);
        let f1 = tape.mm(h3, Trans::N, w.ffn_in_w, Trans::N);
        let f1 = tape.add_bias(f1, w.ffn_in_b);
        let f1 = tape.gelu(f1);
        let f2 = tape.mm(f1, Trans::N, w.ffn_out_w, Trans::N);
        let f2 = tape.add_bias(f2, w.ffn_out_b);
        let f2 = tape.reshape(f2, &[b, t, d]);
        let out = tape.add(mid, f2);
        BlockOut {
            tokens: out,
            att,
            ffn_hidden: f1,
        }
    }

    /// Residual increment of a block: block_apply(x) - x. The auxiliary path
    /// uses this so zero weights contribute exactly nothing.
    fn block_delta(&self, tape: &mut Tape<T>, x: Var, w: &BlockVars) -> BlockOut {
        let bo = self.block_apply(tape, x, w);
        let neg = tape.scale(x, T::from_f64(-1.0));
        BlockOut {
            tokens: tape.add(bo.tokens, neg),
            att: bo.att,
            ffn_hidden: bo.ffn_hidden,
        }
    }

    /// Embed images [B, C, H, W] into the initial token state [B, T, d].
    pub fn embed(&self, tape: &mut Tape<T>, images: Var, bound: &Bound) -> Var {
        let cfg = &self.cfg;
        let sh = tape.value(images).shape().to_vec();
        assert_eq!(
            sh[1..],
            [cfg.channels, cfg.image, cfg.image],
            "image batch shape {sh:?} does not match config"
        );
        let b = sh[0];
        let tokens = tape.patchify(images, cfg.patch);
        let pd = cfg.channels * cfg.patch * cfg.patch;
        let n = cfg.patches();
        let flat = tape.reshape(tokens, &[b * n, pd]);
        let proj = tape.mm(flat, Trans::N, bound.var("embed.proj.w"), Trans::N);
        let proj = tape.add_bias(proj, bound.var("embed.proj.b"));
        let patches = tape.reshape(proj, &[b, n, cfg.embed_dim]);
        let mut leading = vec![bound.var("embed.cls")];
        if cfg.distill {
            leading.push(bound.var("embed.dist"));
        }
        if cfg.registers > 0 {
            leading.push(bound.var("embed.reg"));
        }
        let x = tape.concat_tokens(&leading, patches);
        tape.add_rows(x, bound.var("embed.pos"))
    }

    fn te_row(&self, tape: &mut Tape<T>, bound: &Bound, t: usize) -> Var {
        let te = bound.var("embed.te");
        let row = tape.slice_rows(te, t, 1);
        tape.reshape(row, &[self.cfg.embed_dim])
    }

    fn check_finite(
        &self,
        tape: &Tape<T>,
        x: Var,
        application: usize,
        step: usize,
    ) -> Result<(), ModelError> {
        if tape.value(x).all_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFinite { application, step })
        }
    }

    /// The full recurrence from embedded tokens. steps=0 returns the input
    /// state unchanged (this is the documented meaning, not an error).
    pub fn forward_tokens(
        &self,
        tape: &mut Tape<T>,
        x0: Var,
        bound: &Bound,
        opts: ForwardOpts,
        hook: Option<&WeightHook<'_, T>>,
    ) -> Result<ForwardOut, ModelError> {
        let cfg = &self.cfg;
        let blocks: Vec<BlockVars> = (0..cfg.blocks)
            .map(|b| self.block_vars(bound, &format!("block{b}")))
            .collect();
        let gblock = match cfg.variant {
            Variant::Fl { tied: false, .. } | Variant::Sc { tied: false, .. } => {
                Some(self.block_vars(bound, "gblock0"))
            }
            Variant::Fl { tied: true, .. } | Variant::Sc { tied: true, .. } => Some(blocks[0]),
            _ => None,
        };
        let mut out = ForwardOut {
            tokens: x0,
            trace: Vec::new(),
            attn: Vec::new(),
            ffn: Vec::new(),
            applications: 0,
        };
        let mut x = x0;
        let mut memory: Option<Var> = None;
        for t in 0..cfg.steps {
            match cfg.variant {
                Variant::Base | Variant::Te => {
                    if cfg.variant.uses_te() {
                        let te = self.te_row(tape, bound, t);
                        x = tape.add_bias(x, te);
                    }
                    for w in &blocks {
                        let w = match hook {
                            Some(h) => h(tape, bound, out.applications, w),
                            None => *w,
                        };
                        let bo = self.block_apply(tape, x, &w);
                        x = bo.tokens;
                        out.applications += 1;
                        self.check_finite(tape, x, out.applications - 1, t)?;
                        if opts.trace {
                            out.trace.push(x);
                        }
                        if opts.attn {
                            out.attn.push(bo.att);
                        }
                        if opts.ffn {
                            out.ffn.push(bo.ffn_hidden);
                        }
                    }
                }
                Variant::Fl { n, .. } => {
                    let g = gblock.expect("fl has an auxiliary block");
                    let mut y = tape.constant(Tensor::zeros(tape.value(x).shape()));
                    for _ in 0..n {
                        let u = tape.add(y, x);
                        let bo = self.block_delta(tape, u, &g);
                        y = bo.tokens;
                        out.applications += 1;
                        self.check_finite(tape, y, out.applications - 1, t)?;
                    }
                    let te = self.te_row(tape, bound, t);
                    let z = tape.add_bias(x, te);
                    let z = tape.add(z, y);
                    let w = match hook {
                        Some(h) => h(tape, bound, out.applications, &blocks[0]),
                        None => blocks[0],
                    };
                    let bo = self.block_apply(tape, z, &w);
                    x = bo.tokens;
                    out.applications += 1;
                    self.check_finite(tape, x, out.applications - 1, t)?;
                    if opts.trace {
                        out.trace.push(x);
                    }
                    if opts.attn {
                        out.attn.push(bo.att);
                    }
                    if opts.ffn {
                        out.ffn.push(bo.ffn_hidden);
                    }
                }
                Variant::Sc { n, .. } => {
                    let g = gblock.expect("sc has an auxiliary block");
                    if t % n == 0 {
                        let bo = self.block_delta(tape, x, &g);
                        memory = Some(bo.tokens);
                        out.applications += 1;
                        self.check_finite(tape, bo.tokens, out.applications - 1, t)?;
                    }
                    let te = self.te_row(tape, bound, t);
                    let z = tape.add_bias(x, te);
                    let z = tape.add(z, memory.expect("refreshed at t=0"));
                    let w = match hook {
                        Some(h) => h(tape, bound, out.applications, &blocks[0]),
                        None => blocks[0],
                    };
                    let bo = self.block_apply(tape, z, &w);
                    x = bo.tokens;
                    out.applications += 1;
                    self.check_finite(tape, x, out.applications - 1, t)?;
                    if opts.trace {
                        out.trace.push(x);
                    }
                    if opts.attn {
                        out.attn.push(bo.att);
                    }
                    if opts.ffn {
                        out.ffn.push(bo.ffn_hidden);
                    }
                }
            }
        }
        out.tokens = x;
        Ok(out)
    }

    /// Embed then run the recurrence.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        images: Var,
        bound: &Bound,
        opts: ForwardOpts,
        hook: Option<&WeightHook<'_, T>>,
    ) -> Result<ForwardOut, ModelError> {
        let x0 = self.embed(tape, images, bound);
        self.forward_tokens(tape, x0, bound, opts, hook)
    }

    /// Normalized class-token features [B, d] of a token state.
    pub fn cls_features(&self, tape: &mut Tape<T>, tokens: Var, bound: &Bound) -> Var {
        let cls = tape.select_token(tokens, 0);
        tape.rmsnorm(cls, bound.var("final_norm.g"), T::from_f64(self.cfg.eps))
    }

    /// Classifier logits [B, classes] from the final token state.
    pub fn classify(&self, tape: &mut Tape<T>, tokens: Var, bound: &Bound) -> Var {
        let feats = self.cls_features(tape, tokens, bound);
        let logits = tape.mm(feats, Trans::N, bound.var("head.w"), Trans::N);
        tape.add_bias(logits, bound.var("head.b"))
    }

    /// Distillation-head logits from the distillation token.
    pub fn classify_distill(&self, tape: &mut Tape<T>, tokens: Var, bound: &Bound) -> Var {
        assert!(self.cfg.distill, "model has no distillation token");
        let tok = tape.select_token(tokens, self.cfg.distill_index());
        let feats = tape.rmsnorm(tok, bound.var("final_norm.g"), T::from_f64(self.cfg.eps));
        let logits = tape.mm(feats, Trans::N, bound.var("head_dist.w"), Trans::N);
        tape.add_bias(logits, bound.var("head_dist.b"))
    }

    /// Inference probabilities: softmax of the class head, averaged with the
    /// distillation head's softmax when that token exists.
    pub fn predict_probs(
        &self,
        tape: &mut Tape<T>,
        tokens: Var,
        bound: &Bound,
    ) -> Var {
        let logits = self.classify(tape, tokens, bound);
        let p = tape.softmax(logits);
        if !self.cfg.distill {
            return p;
        }
        let dl = self.classify_distill(tape, tokens, bound);
        let pd = tape.softmax(dl);
        let sum = tape.add(p, pd);
        tape.scale(sum, T::from_f64(0.5))
    }

    /// Convenience inference: logits for an image batch, no gradients.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Some(&|_| false));
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x, &bound, ForwardOpts::default(), None)?;
        let logits = self.classify(&mut tape, out.tokens, &bound);
        Ok(tape.value(logits).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.cfg.to_config());
        for (name, t) in self.params.iter() {
            ck.insert(name, t.convert());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let cfg = ModelConfig::from_config(&ck.config)?;
        let reference = Model::<T>::init(cfg.clone(), 0)?;
        let mut params = Params::new();
        for name in reference.params.names() {
            let t = ck.get(name)?;
            assert_eq!(
                t.shape(),
                reference.params.get(name).shape(),
                "checkpoint tensor {name:?} has the wrong shape"
            );
            params.insert(name, t.convert());
        }
        Ok(Model { cfg, params })
    }
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

/// Exact parameter counts by component; `total()` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embed: u64,
    pub blocks: u64,
    pub gblock: u64,
    pub final_norm: u64,
    pub heads: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.embed + self.blocks + self.gblock + self.final_norm + self.heads
    }
}

fn block_param_count(d: u64, ffn: u64) -> u64 {
    // qkv + proj + ffn_in + ffn_out with biases, plus two norm gains.
    (d * 3 * d + 3 * d) + (d * d + d) + (d * ffn + ffn) + (ffn * d + d) + 2 * d
}

pub fn param_breakdown(cfg: &ModelConfig) -> ParamBreakdown {
    let d = cfg.embed_dim as u64;
    let ffn = cfg.ffn_dim() as u64;
    let tokens = cfg.tokens() as u64;
    let mut embed = (cfg.channels * cfg.patch * cfg.patch) as u64 * d + d; // projection
    embed += tokens * d; // positional rows
    embed += d; // class token
    if cfg.distill {
        embed += d;
    }
    embed += cfg.registers as u64 * d;
    if cfg.variant.uses_te() {
        embed += cfg.steps as u64 * d;
    }
    let blocks = cfg.blocks as u64 * block_param_count(d, ffn);
    let gblock = match cfg.variant {
        Variant::Fl { tied: false, .. } | Variant::Sc { tied: false, .. } => {
            block_param_count(d, ffn)
        }
        _ => 0,
    };
    let mut heads = d * cfg.classes as u64 + cfg.classes as u64;
    if cfg.distill {
        heads *= 2;
    }
    ParamBreakdown {
        embed,
        blocks,
        gblock,
        final_norm: d,
        heads,
    }
}

/// Total learnable parameter count.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    param_breakdown(cfg).total()
}

/// FLOPs of one single-image forward, multiplies and adds charged separately
/// (2 per multiply-accumulate), split by component.
///
/// The headline total covers the dense projections (patch embedding, QKV,
/// attention output, both FFN layers, classifier); that is the convention
/// under which published transformer compute figures are quoted, and the one
/// `total()` reports. The attention score/value batched matmuls are tallied
/// separately in `attn_matmuls` for callers that want them included.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub embed: u64,
    pub block_linears: u64,
    pub attn_matmuls: u64,
    pub heads: u64,
}

impl FlopBreakdown {
    /// Dense-projection FLOPs: embed + block linears + classifier heads.
    pub fn total(&self) -> u64 {
        self.embed + self.block_linears + self.heads
    }

    /// Same, plus the attention score and value matmuls.
    pub fn total_with_attention(&self) -> u64 {
        self.total() + self.attn_matmuls
    }
}

/// Dense-linear FLOPs of one block application on `tokens` tokens.
pub fn application_linear_flops(cfg: &ModelConfig) -> u64 {
    let t = cfg.tokens() as u64;
    let d = cfg.embed_dim as u64;
    let ffn = cfg.ffn_dim() as u64;
    2 * t * (d * 3 * d + d * d + 2 * d * ffn)
}

/// Attention score + value matmul FLOPs of one block application.
pub fn application_attn_flops(cfg: &ModelConfig) -> u64 {
    let t = cfg.tokens() as u64;
    let d = cfg.embed_dim as u64;
    4 * t * t * d
}

/// Patch-projection FLOPs.
pub fn embed_flops(cfg: &ModelConfig) -> u64 {
    2 * cfg.patches() as u64 * (cfg.channels * cfg.patch * cfg.patch) as u64 * cfg.embed_dim as u64
}

/// Classifier FLOPs (both heads when a distillation token exists).
pub fn head_flops(cfg: &ModelConfig) -> u64 {
    let one = 2 * cfg.embed_dim as u64 * cfg.classes as u64;
    if cfg.distill {
        2 * one
    } else {
        one
    }
}

/// Block applications one forward executes (F and auxiliary G both count).
pub fn forward_applications(cfg: &ModelConfig) -> u64 {
    let s = cfg.steps as u64;
    match cfg.variant {
        Variant::Base | Variant::Te => cfg.blocks as u64 * s,
        Variant::Fl { n, .. } => s * (n as u64 + 1),
        Variant::Sc { n, .. } => s + s.div_ceil(n as u64),
    }
}

pub fn flop_breakdown(cfg: &ModelConfig) -> FlopBreakdown {
    let apps = forward_applications(cfg);
    FlopBreakdown {
        embed: embed_flops(cfg),
        block_linears: apps * application_linear_flops(cfg),
        attn_matmuls: apps * application_attn_flops(cfg),
        heads: head_flops(cfg),
    }
}

/// Headline FLOP count of one forward pass (see [`FlopBreakdown`]).
pub fn count_flops(cfg: &ModelConfig) -> u64 {
    flop_breakdown(cfg).total()
}
