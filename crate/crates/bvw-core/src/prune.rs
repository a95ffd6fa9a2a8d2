//! Step-conditioned weight masks on the shared block's linear layers, the
//! iterative magnitude-pruning procedure (mask-constrained full training,
//! per-step graft training, rank-and-remove, weight rewind), and the pathway
//! overlap metrics built on the resulting masks.
//!
//! Masks are binary, one per recurrent step per masked layer (QKV, attention
//! projection, both FFN layers). A mask only ever loses entries: pruning at
//! step t removes the smallest-magnitude active weights, with ties broken by
//! flat index order. Biases, norms, embeddings, and the classifier are never
//! masked. Steps are 0-based internally; CSV output is 1-based.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::dataio::{one_hot, permutation, Dataset};
use crate::model::{BlockVars, Bound, Model, ModelConfig, ModelError, Params, Variant};
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor, Trans};
use crate::train::{self, AdamW, Normalization, Recipe, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum PruneError {
    #[error("pruning requires a single shared block, got {0}")]
    Blocks(usize),
    #[error("pruning masks index recurrent steps; variant must be plain or time-embedded")]
    Variant,
    #[error("mask shape {mask:?} does not match weight shape {weight:?}")]
    Shape { mask: Vec<usize>, weight: Vec<usize> },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Short names of the masked layers, paired with their parameter suffixes.
pub const MASKED_LAYERS: [(&str, &str); 4] = [
    ("qkv", "attn.qkv.w"),
    ("proj", "attn.proj.w"),
    ("ffn_in", "ffn.in.w"),
    ("ffn_out", "ffn.out.w"),
];

/// One binary mask with the shape of its weight matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<u8>,
}

impl Mask {
    pub fn ones(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            bits: vec![1; shape.iter().product()],
        }
    }

    pub fn from_bits(shape: &[usize], bits: Vec<u8>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), bits.len());
        assert!(bits.iter().all(|&b| b <= 1), "masks are binary");
        Mask {
            shape: shape.to_vec(),
            bits,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn numel(&self) -> usize {
        self.bits.len()
    }

    pub fn active(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Fraction of removed entries.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.active() as f64 / self.numel() as f64
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            &self.shape,
            self.bits.iter().map(|&b| b as f32).collect::<Vec<f32>>(),
        )
    }
}

/// Masked linear evaluation: (W masked by m) applied to x, bias untouched.
pub fn masked_linear(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    b: &Tensor<f32>,
    m: &Mask,
) -> Result<Tensor<f32>, PruneError> {
    if m.shape() != w.shape() {
        return Err(PruneError::Shape {
            mask: m.shape().to_vec(),
            weight: w.shape().to_vec(),
        });
    }
    let wm = tensor::hadamard(w, &m.to_tensor());
    Ok(tensor::add_bias(&tensor::mm(x, Trans::N, &wm, Trans::N), b))
}

/// Intersection-over-union of the active sets. Two empty masks agree
/// completely by convention.
pub fn jaccard(a: &Mask, b: &Mask) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mask shapes differ");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fraction of step t's active weights used by no other step. A fully pruned
/// mask reports the sentinel 1.0 together with a flag.
pub fn specialization(t: usize, masks: &[Mask]) -> (f64, bool) {
    let m = &masks[t];
    let active = m.active();
    if active == 0 {
        return (1.0, true);
    }
    let mut unique = 0usize;
    for i in 0..m.numel() {
        if m.bits[i] == 1
            && masks
                .iter()
                .enumerate()
                .all(|(o, om)| o == t || om.bits[i] == 0)
        {
            unique += 1;
        }
    }
    (unique as f64 / active as f64, false)
}

/// Size-weighted mean Jaccard of mask t against every other step, weighting
/// each pair by the size of its union (empty unions carry no weight; if all
/// are empty the masks agree trivially).
pub fn weighted_mean_jaccard(t: usize, masks: &[Mask]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (o, om) in masks.iter().enumerate() {
        if o == t {
            continue;
        }
        let union = masks[t]
            .bits
            .iter()
            .zip(&om.bits)
            .filter(|(&x, &y)| (x | y) == 1)
            .count() as f64;
        num += union * jaccard(&masks[t], om);
        den += union;
    }
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Counts of weights active somewhere, bucketed by how many steps use them:
/// lower, middle, and upper third of the schedule.
pub fn utilization_histogram(masks: &[Mask]) -> [u64; 3] {
    let s = masks.len();
    assert!(s >= 1);
    let n = masks[0].numel();
    let mut hist = [0u64; 3];
    for i in 0..n {
        let u = masks.iter().filter(|m| m.bits[i] == 1).count();
        if u == 0 {
            continue;
        }
        hist[(u - 1) * 3 / s] += 1;
    }
    hist
}

/// Zero out the `rate` fraction (floored) of the smallest-magnitude active
/// weights. Ties break toward the lower flat index. Returns how many entries
/// were removed; an empty active set removes nothing.
pub fn remove_smallest(mask: &mut Mask, weights: &Tensor<f32>, rate: f64) -> usize {
    assert_eq!(mask.shape(), weights.shape(), "mask shapes differ");
    let mut active: Vec<usize> = (0..mask.numel()).filter(|&i| mask.bits[i] == 1).collect();
    let k = (rate * active.len() as f64).floor() as usize;
    if k == 0 {
        return 0;
    }
    let w = weights.data();
    active.sort_by(|&a, &b| {
        w[a].abs()
            .partial_cmp(&w[b].abs())
            .expect("finite weights")
            .then(a.cmp(&b))
    });
    for &i in &active[..k] {
        mask.bits[i] = 0;
    }
    k
}

/// All masks of one model: per masked layer, one mask per recurrent step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepMaskSet {
    steps: usize,
    layers: BTreeMap<String, Vec<Mask>>,
}

impl StepMaskSet {
    /// Everything active. Requires the single-shared-block recurrence (mask
    /// index == step index).
    pub fn all_ones(cfg: &ModelConfig) -> Result<Self, PruneError> {
        if cfg.blocks != 1 {
            return Err(PruneError::Blocks(cfg.blocks));
        }
        if !matches!(cfg.variant, Variant::Base | Variant::Te) {
            return Err(PruneError::Variant);
        }
        let d = cfg.embed_dim;
        let ffn = cfg.ffn_dim();
        let shapes: [(&str, Vec<usize>); 4] = [
            ("qkv", vec![d, 3 * d]),
            ("proj", vec![d, d]),
            ("ffn_in", vec![d, ffn]),
            ("ffn_out", vec![ffn, d]),
        ];
        let mut layers = BTreeMap::new();
        for (name, shape) in shapes {
            layers.insert(
                name.to_string(),
                (0..cfg.steps).map(|_| Mask::ones(&shape)).collect(),
            );
        }
        Ok(StepMaskSet {
            steps: cfg.steps,
            layers,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn mask(&self, layer: &str, step: usize) -> &Mask {
        &self.layers[layer][step]
    }

    pub fn mask_mut(&mut self, layer: &str, step: usize) -> &mut Mask {
        self.layers.get_mut(layer).expect("known layer").get_mut(step).expect("step in range")
    }

    pub fn step_masks(&self, layer: &str) -> &[Mask] {
        &self.layers[layer]
    }

    /// Fraction of removed entries at one step, over all masked layers.
    pub fn step_sparsity(&self, step: usize) -> f64 {
        let mut zeros = 0usize;
        let mut total = 0usize;
        for masks in self.layers.values() {
            let m = &masks[step];
            zeros += m.numel() - m.active();
            total += m.numel();
        }
        zeros as f64 / total as f64
    }

    /// Mask-level sparsity: removed fraction averaged over steps.
    pub fn mask_level_sparsity(&self) -> f64 {
        (0..self.steps).map(|s| self.step_sparsity(s)).sum::<f64>() / self.steps as f64
    }

    /// Weight-level sparsity: fraction of weights inactive in every step.
    pub fn weight_level_sparsity(&self) -> f64 {
        let mut dead = 0usize;
        let mut total = 0usize;
        for masks in self.layers.values() {
            let n = masks[0].numel();
            total += n;
            for i in 0..n {
                if masks.iter().all(|m| m.bits[i] == 0) {
                    dead += 1;
                }
            }
        }
        dead as f64 / total as f64
    }

    /// Per-application weight rewrite enforcing the masks; the gradient of a
    /// masked-out entry is zero, so training cannot resurrect it.
    pub fn hook(&self) -> impl Fn(&mut Tape<f32>, &Bound, usize, &BlockVars) -> BlockVars + '_ {
        move |tape: &mut Tape<f32>, _: &Bound, app: usize, w: &BlockVars| {
            let mut out = *w;
            out.qkv_w = tape.mul_const(w.qkv_w, self.mask("qkv", app).to_tensor());
            out.proj_w = tape.mul_const(w.proj_w, self.mask("proj", app).to_tensor());
            out.ffn_in_w = tape.mul_const(w.ffn_in_w, self.mask("ffn_in", app).to_tensor());
            out.ffn_out_w = tape.mul_const(w.ffn_out_w, self.mask("ffn_out", app).to_tensor());
            out
        }
    }
}

/// Schedule and rates of the iterative procedure.
#[derive(Debug, Clone)]
pub struct PruneConfig {
    pub rounds: usize,
    pub rate: f64,
    /// Recipe for the full-model training phase of each round; its `epochs`
    /// field is the E of the schedule (0 skips the phase).
    pub recipe: Recipe,
    pub graft_epochs: usize,
    pub graft_lr: f64,
    pub batch_size: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            rounds: 13,
            rate: 0.2,
            recipe: Recipe::default(),
            graft_epochs: 1,
            graft_lr: 1e-4,
            batch_size: 128,
        }
    }
}

pub struct PruneState {
    pub theta_init: Params<f32>,
    pub masks: StepMaskSet,
    pub round: usize,
}

impl PruneState {
    pub fn new(model: &Model<f32>) -> Result<Self, PruneError> {
        Ok(PruneState {
            theta_init: model.params.clone(),
            masks: StepMaskSet::all_ones(&model.cfg)?,
            round: 0,
        })
    }
}

/// One CSV row of the pruning log.
#[derive(Debug, Clone)]
pub struct PruneRow {
    pub round: usize,
    pub layer: String,
    /// 1-based recurrent step.
    pub step: usize,
    pub mask_sparsity: f64,
    pub weight_sparsity: f64,
    pub specialization: f64,
    pub fully_pruned: bool,
    pub mean_jaccard: f64,
    pub val_acc: f64,
}

pub fn prune_csv_header() -> &'static str {
    "round,layer,step,mask_sparsity,weight_sparsity,specialization,mean_jaccard,val_acc"
}

pub fn prune_csv_line(r: &PruneRow) -> String {
    format!(
        "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
        r.round, r.layer, r.step, r.mask_sparsity, r.weight_sparsity, r.specialization, r.mean_jaccard, r.val_acc
    )
}

pub struct RoundReport {
    pub rows: Vec<PruneRow>,
    /// (layer, 1-based step) pairs whose active set was empty and were
    /// skipped.
    pub skipped: Vec<(String, usize)>,
    pub val_acc: f64,
}

fn graft_param_names() -> Vec<(&'static str, &'static str)> {
    vec![
        ("graft.norm1.g", "norm1.g"),
        ("graft.attn.qkv.w", "attn.qkv.w"),
        ("graft.attn.qkv.b", "attn.qkv.b"),
        ("graft.attn.proj.w", "attn.proj.w"),
        ("graft.attn.proj.b", "attn.proj.b"),
        ("graft.norm2.g", "norm2.g"),
        ("graft.ffn.in.w", "ffn.in.w"),
        ("graft.ffn.in.b", "ffn.in.b"),
        ("graft.ffn.out.w", "ffn.out.w"),
        ("graft.ffn.out.b", "ffn.out.b"),
    ]
}

/// Clone the shared block out of a parameter snapshot.
fn graft_from(theta: &Params<f32>) -> Params<f32> {
    let mut g = Params::new();
    for (gname, suffix) in graft_param_names() {
        g.insert(gname, theta.get(&format!("block0.{suffix}")).clone());
    }
    g
}

fn bind_graft(tape: &mut Tape<f32>, graft: &Params<f32>) -> HashMap<String, Var> {
    let mut vars = HashMap::new();
    for (name, t) in graft.iter() {
        vars.insert(name.to_string(), tape.leaf(t.clone(), true));
    }
    vars
}

fn graft_block_vars(vars: &HashMap<String, Var>) -> BlockVars {
    let v = |s: &str| vars[&format!("graft.{s}")];
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

/// Train the graft for `epochs` with the main encoder frozen, substituting
/// the graft (masked with step t's masks) at recurrent step t only. Plain
/// cross-entropy, no augmentation: the scaled-down sibling of the main
/// recipe.
#[allow(clippy::too_many_arguments)]
fn train_graft(
    model: &Model<f32>,
    masks: &StepMaskSet,
    graft: &mut Params<f32>,
    t: usize,
    ds: &Dataset,
    idx: &[usize],
    norm: &Normalization,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(), PruneError> {
    let mut opt = AdamW::new(0.0);
    for epoch in 0..epochs {
        let mut shuffle = stream(seed, &format!("graft.step{t}.epoch{epoch}"));
        let order = permutation(idx.len(), &mut shuffle);
        for chunk in order.chunks(batch_size.max(1)) {
            let sel: Vec<usize> = chunk.iter().map(|&i| idx[i]).collect();
            let (images, labels) = ds.batch::<f32>(&sel, &norm.mean, &norm.std);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, Some(&|_| false));
            let gvars = bind_graft(&mut tape, graft);
            let gblock = graft_block_vars(&gvars);
            let hook = |tape: &mut Tape<f32>, _: &Bound, app: usize, w: &BlockVars| -> BlockVars {
                let src = if app == t { gblock } else { *w };
                let mut out = src;
                out.qkv_w = tape.mul_const(src.qkv_w, masks.mask("qkv", app).to_tensor());
                out.proj_w = tape.mul_const(src.proj_w, masks.mask("proj", app).to_tensor());
                out.ffn_in_w = tape.mul_const(src.ffn_in_w, masks.mask("ffn_in", app).to_tensor());
                out.ffn_out_w =
                    tape.mul_const(src.ffn_out_w, masks.mask("ffn_out", app).to_tensor());
                out
            };
            let img = tape.constant(images);
            let out = model.forward(&mut tape, img, &bound, Default::default(), Some(&hook))?;
            let logits = model.classify(&mut tape, out.tokens, &bound);
            let loss = tape.ce_with_q(logits, one_hot::<f32>(&labels, model.cfg.classes));
            let grads = tape.backward(loss).expect("scalar loss");
            let mut gmap: HashMap<String, Vec<f64>> = HashMap::new();
            for (name, &var) in &gvars {
                if let Some(g) = grads.get(var) {
                    gmap.insert(name.clone(), g.iter().map(|&x| x as f64).collect());
                }
            }
            opt.step(graft, &gmap, lr);
        }
    }
    Ok(())
}

/// One full round: train under the current masks, per-step graft training and
/// magnitude ranking, mask update, weight rewind.
#[allow(clippy::too_many_arguments)]
pub fn prune_round(
    model: &mut Model<f32>,
    state: &mut PruneState,
    ds: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    norm: &Normalization,
    cfg: &PruneConfig,
) -> Result<RoundReport, PruneError> {
    let round = state.round + 1;
    let seed = cfg.recipe.seed ^ ((round as u64) << 32);

    // Phase 1: train the full model for E epochs with masks enforced.
    if cfg.recipe.epochs > 0 {
        let masks = state.masks.clone();
        let hook = masks.hook();
        train::fit(
            model,
            ds,
            train_idx,
            ds,
            &[],
            &cfg.recipe,
            norm,
            None,
            None,
            Some(&hook),
            None,
        )?;
    }
    let masks_now = state.masks.clone();
    let eval_hook = masks_now.hook();
    let val_acc = if val_idx.is_empty() {
        f64::NAN
    } else {
        train::evaluate(model, ds, val_idx, norm, cfg.batch_size, Some(&eval_hook))?.1
    };

    // Phase 2: per step, train a graft clone of the initial block and rank
    // its masked layers.
    let mut skipped = Vec::new();
    let mut new_masks = state.masks.clone();
    for t in 0..model.cfg.steps {
        let mut graft = graft_from(&state.theta_init);
        if cfg.graft_epochs > 0 {
            train_graft(
                model,
                &state.masks,
                &mut graft,
                t,
                ds,
                train_idx,
                norm,
                cfg.graft_epochs,
                cfg.graft_lr,
                cfg.batch_size,
                seed,
            )?;
        }
        for (layer, suffix) in MASKED_LAYERS {
            if state.masks.mask(layer, t).active() == 0 {
                skipped.push((layer.to_string(), t + 1));
                continue;
            }
            let w = graft.get(&format!("graft.{suffix}"));
            remove_smallest(new_masks.mask_mut(layer, t), w, cfg.rate);
        }
    }

    // Phase 3: rewind to the initial weights; only the masks survive.
    model.params = state.theta_init.clone();
    state.masks = new_masks;
    state.round = round;

    let mut rows = Vec::new();
    for (layer, _) in MASKED_LAYERS {
        let step_masks = state.masks.step_masks(layer);
        let layer_weight_sparsity = {
            let n = step_masks[0].numel();
            let dead = (0..n)
                .filter(|&i| step_masks.iter().all(|m| m.bits[i] == 0))
                .count();
            dead as f64 / n as f64
        };
        for t in 0..model.cfg.steps {
            let (spec, fully) = specialization(t, step_masks);
            rows.push(PruneRow {
                round,
                layer: layer.to_string(),
                step: t + 1,
                mask_sparsity: step_masks[t].sparsity(),
                weight_sparsity: layer_weight_sparsity,
                specialization: spec,
                fully_pruned: fully,
                mean_jaccard: weighted_mean_jaccard(t, step_masks),
                val_acc,
            });
        }
    }
    Ok(RoundReport {
        rows,
        skipped,
        val_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_shapes;
    use crate::model::WeightHook;

    fn mask_from(pattern: &[u8]) -> Mask {
        Mask::from_bits(&[pattern.len()], pattern.to_vec())
    }

    #[test]
    fn masked_linear_reference_cases() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::new(&[3, 2], vec![1.0, -1.0, 0.5, 2.0, -2.0, 1.0]);
        let b = Tensor::new(&[2], vec![0.25, -0.5]);
        let ones = Mask::ones(&[3, 2]);
        let plain = tensor::add_bias(&tensor::mm(&x, Trans::N, &w, Trans::N), &b);
        assert_eq!(
            masked_linear(&x, &w, &b, &ones).unwrap().data(),
            plain.data()
        );
        let zeros = Mask::from_bits(&[3, 2], vec![0; 6]);
        let z = masked_linear(&x, &w, &b, &zeros).unwrap();
        assert_eq!(z.data(), &[0.25, -0.5, 0.25, -0.5]);
        // Two different masks disagree where the active rows differ.
        let m1 = Mask::from_bits(&[3, 2], vec![1, 1, 0, 0, 0, 0]);
        let m2 = Mask::from_bits(&[3, 2], vec![0, 0, 1, 1, 0, 0]);
        let y1 = masked_linear(&x, &w, &b, &m1).unwrap();
        let y2 = masked_linear(&x, &w, &b, &m2).unwrap();
        assert_ne!(y1.data(), y2.data());
        // Shape mismatch is an error.
        assert!(masked_linear(&x, &w, &b, &Mask::ones(&[2, 3])).is_err());
    }

    #[test]
    fn jaccard_reference_cases() {
        let a = mask_from(&[1, 1, 0, 0]);
        assert_eq!(jaccard(&a, &a), 1.0);
        let b = mask_from(&[0, 0, 1, 1]);
        assert_eq!(jaccard(&a, &b), 0.0);
        // Intersection 1, union 3.
        let c = mask_from(&[1, 0, 1, 0]);
        assert!((jaccard(&a, &c) - 1.0 / 3.0).abs() < 1e-15);
        let e = mask_from(&[0, 0, 0, 0]);
        assert_eq!(jaccard(&e, &e), 1.0);
    }

    #[test]
    fn specialization_reference_cases() {
        // Disjoint from all others.
        let masks = vec![
            mask_from(&[1, 1, 0, 0]),
            mask_from(&[0, 0, 1, 0]),
            mask_from(&[0, 0, 0, 1]),
        ];
        assert_eq!(specialization(0, &masks), (1.0, false));
        // Subset of another mask.
        let masks = vec![mask_from(&[1, 1, 0, 0]), mask_from(&[1, 1, 1, 0])];
        assert_eq!(specialization(0, &masks), (0.0, false));
        // 2 unique of 4 active.
        let masks = vec![mask_from(&[1, 1, 1, 1]), mask_from(&[1, 1, 0, 0])];
        assert_eq!(specialization(0, &masks), (0.5, false));
        // Fully pruned: sentinel plus flag.
        let masks = vec![mask_from(&[0, 0, 0, 0]), mask_from(&[1, 0, 0, 0])];
        assert_eq!(specialization(0, &masks), (1.0, true));
    }

    #[test]
    fn utilization_reference_cases() {
        let s12_all = vec![mask_from(&[1, 1, 1]); 12];
        assert_eq!(utilization_histogram(&s12_all), [0, 0, 3]);
        // Disjoint per-step masks: every weight used exactly once.
        let mut disjoint = vec![mask_from(&[0, 0, 0]); 3];
        for (i, m) in disjoint.iter_mut().enumerate() {
            m.bits[i] = 1;
        }
        assert_eq!(utilization_histogram(&disjoint), [3, 0, 0]);
        // Utilizations {2, 6, 11} with S=12: one per bucket.
        let mut masks = vec![mask_from(&[0, 0, 0]); 12];
        for (step, m) in masks.iter_mut().enumerate() {
            if step < 2 {
                m.bits[0] = 1;
            }
            if step < 6 {
                m.bits[1] = 1;
            }
            if step < 11 {
                m.bits[2] = 1;
            }
        }
        assert_eq!(utilization_histogram(&masks), [1, 1, 1]);
    }

    #[test]
    fn remove_smallest_ranks_and_breaks_ties_by_index() {
        let w = Tensor::new(&[2, 3], vec![0.5, -0.1, 0.3, -0.1, 0.9, 0.05]);
        let mut m = Mask::ones(&[2, 3]);
        // 20% of 6 floors to 1: the single smallest |w| is 0.05 at index 5.
        assert_eq!(remove_smallest(&mut m, &w, 0.2), 1);
        assert_eq!(m.bits(), &[1, 1, 1, 1, 1, 0]);
        // Next removal: |w|=0.1 at indices 1 and 3; the tie goes to 1.
        assert_eq!(remove_smallest(&mut m, &w, 0.2), 1);
        assert_eq!(m.bits(), &[1, 0, 1, 1, 1, 0]);
        // Empty active set removes nothing.
        let mut empty = Mask::from_bits(&[2, 3], vec![0; 6]);
        assert_eq!(remove_smallest(&mut empty, &w, 0.9), 0);
    }

    #[test]
    fn repeated_rounds_track_the_compounding_rate() {
        // 100k entries, 20% per round: sparsity after p rounds stays within
        // rounding of 1 - 0.8^p.
        let n = 100_000usize;
        let mut r = stream(3, "prune.magnitudes");
        let w = Tensor::from_fn(&[n], |_| rand::Rng::gen_range(&mut r, -1.0f32..1.0f32));
        let mut m = Mask::ones(&[n]);
        for p in 1..=30 {
            remove_smallest(&mut m, &w, 0.2);
            let want = 1.0 - 0.8f64.powi(p);
            assert!(
                (m.sparsity() - want).abs() < 1e-3,
                "round {p}: sparsity {} vs {want}",
                m.sparsity()
            );
        }
        // The published sequence at the checkpoints used in reports.
        let mut m = Mask::ones(&[n]);
        let mut vals = Vec::new();
        for p in 1..=30 {
            remove_smallest(&mut m, &w, 0.2);
            if p % 5 == 0 {
                vals.push((m.sparsity() * 1000.0).round() / 10.0);
            }
        }
        assert_eq!(vals, vec![67.2, 89.3, 96.5, 98.8, 99.6, 99.9]);
    }

    #[test]
    fn weight_level_never_exceeds_mask_level() {
        let mut r = stream(7, "prune.random_masks");
        for _ in 0..50 {
            let masks: Vec<Mask> = (0..4)
                .map(|_| {
                    Mask::from_bits(
                        &[30],
                        (0..30)
                            .map(|_| u8::from(rand::Rng::gen_bool(&mut r, 0.4)))
                            .collect(),
                    )
                })
                .collect();
            let mask_level = masks.iter().map(Mask::sparsity).sum::<f64>() / masks.len() as f64;
            let dead = (0..30)
                .filter(|&i| masks.iter().all(|m| m.bits[i] == 0))
                .count() as f64
                / 30.0;
            assert!(dead <= mask_level + 1e-12);
        }
    }

    #[test]
    fn mask_set_requires_single_block_recurrence() {
        let mut cfg = ModelConfig::tiny();
        cfg.blocks = 2;
        assert!(matches!(
            StepMaskSet::all_ones(&cfg),
            Err(PruneError::Blocks(2))
        ));
        cfg.blocks = 1;
        cfg.variant = Variant::Fl { n: 2, tied: true };
        assert!(matches!(
            StepMaskSet::all_ones(&cfg),
            Err(PruneError::Variant)
        ));
    }

    fn forward_logits(
        m: &Model<f32>,
        images: &Tensor<f32>,
        hook: Option<&WeightHook<'_, f32>>,
    ) -> Vec<f32> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, Some(&|_| false));
        let img = tape.constant(images.clone());
        let out = m
            .forward(&mut tape, img, &bound, Default::default(), hook)
            .unwrap();
        let logits = m.classify(&mut tape, out.tokens, &bound);
        tape.value(logits).data().to_vec()
    }

    #[test]
    fn masked_forward_hook_matches_direct_zeroing() {
        let cfg = ModelConfig {
            embed_dim: 16,
            heads: 2,
            steps: 2,
            patch: 4,
            image: 8,
            classes: 4,
            ..ModelConfig::tiny()
        };
        let m = Model::<f32>::init(cfg.clone(), 11).unwrap();
        let mut r = stream(5, "prune.images");
        let images =
            Tensor::from_fn(&[2, 3, 8, 8], |_| rand::Rng::gen_range(&mut r, -1.0f32..1.0f32));

        // All-ones masks reproduce the unhooked forward bitwise.
        let ones = StepMaskSet::all_ones(&cfg).unwrap();
        let hook = ones.hook();
        assert_eq!(
            forward_logits(&m, &images, Some(&hook)),
            forward_logits(&m, &images, None)
        );

        // Masking qkv at every step equals zeroing the weights directly.
        let mut all_steps = StepMaskSet::all_ones(&cfg).unwrap();
        for t in 0..cfg.steps {
            for i in 0..200 {
                all_steps.mask_mut("qkv", t).bits[i] = 0;
            }
        }
        let hook = all_steps.hook();
        let masked = forward_logits(&m, &images, Some(&hook));
        let mut zeroed = Model {
            cfg: m.cfg.clone(),
            params: m.params.clone(),
        };
        let mut w = zeroed.params.get("block0.attn.qkv.w").data().to_vec();
        for x in w.iter_mut().take(200) {
            *x = 0.0;
        }
        let shape = zeroed.params.get("block0.attn.qkv.w").shape().to_vec();
        zeroed.params.set("block0.attn.qkv.w", Tensor::new(&shape, w));
        assert_eq!(masked, forward_logits(&zeroed, &images, None));

        // A step-0-only mask differs from both.
        let mut step0 = StepMaskSet::all_ones(&cfg).unwrap();
        for i in 0..200 {
            step0.mask_mut("qkv", 0).bits[i] = 0;
        }
        let hook = step0.hook();
        let step0_out = forward_logits(&m, &images, Some(&hook));
        assert_ne!(step0_out, masked);
        assert_ne!(step0_out, forward_logits(&m, &images, None));
    }

    #[test]
    fn two_rounds_prune_rewind_and_log() {
        let cfg = ModelConfig {
            embed_dim: 32,
            heads: 2,
            steps: 3,
            ..ModelConfig::tiny()
        };
        let mut model = Model::<f32>::init(cfg.clone(), 17).unwrap();
        let theta0: Vec<Vec<f32>> = model.params.iter().map(|(_, t)| t.data().to_vec()).collect();
        let (ds, _) = synth_shapes(48, 19);
        let idx: Vec<usize> = (0..40).collect();
        let val: Vec<usize> = (40..48).collect();
        let norm = Normalization::from_dataset(&ds);
        let pcfg = PruneConfig {
            rounds: 2,
            rate: 0.2,
            recipe: Recipe {
                epochs: 1,
                warmup_epochs: 0,
                base_lr: 5e-4,
                mixup_alpha: 0.0,
                hflip: false,
                batch_size: 16,
                seed: 23,
                ..Recipe::default()
            },
            graft_epochs: 1,
            graft_lr: 1e-4,
            batch_size: 16,
        };
        let mut state = PruneState::new(&model).unwrap();
        let mut sparsity_by_round = Vec::new();
        for round in 1..=pcfg.rounds {
            let report = prune_round(&mut model, &mut state, &ds, &idx, &val, &norm, &pcfg).unwrap();
            assert!(report.skipped.is_empty());
            assert_eq!(report.rows.len(), 4 * cfg.steps);
            assert_eq!(state.round, round);
            // Rewind contract: parameters bitwise equal the snapshot.
            for ((_, t), before) in model.params.iter().zip(&theta0) {
                assert_eq!(t.data(), before.as_slice());
            }
            // Every mask lost exactly floor(0.2 * active) entries this round.
            for (layer, _) in MASKED_LAYERS {
                for t in 0..cfg.steps {
                    let m = state.masks.mask(layer, t);
                    let mut expect = m.numel();
                    for _ in 0..round {
                        expect -= (0.2 * expect as f64).floor() as usize;
                    }
                    assert_eq!(m.active(), expect, "{layer} step {t} round {round}");
                }
            }
            sparsity_by_round.push(state.masks.mask_level_sparsity());
            // Weight-level sparsity never exceeds mask-level.
            assert!(state.masks.weight_level_sparsity() <= state.masks.mask_level_sparsity());
            // CSV rows are well-formed.
            let line = prune_csv_line(&report.rows[0]);
            assert_eq!(line.split(',').count(), 8);
            assert!(line.starts_with(&format!("{round},")));
        }
        // Masks are monotone: sparsity grew round over round.
        assert!(sparsity_by_round[1] > sparsity_by_round[0]);
    }
}
