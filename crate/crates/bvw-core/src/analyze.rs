//! Read-only analyses over trained models: energy-based rank reports,
//! low-rank FFN compression sweeps, class-token attention maps with a
//! localization hit test, activation-maximization images for FFN hidden
//! units, per-step class-token trajectory export, and accuracy as a
//! function of loop depth.
//!
//! Everything here treats the checkpoint as frozen. Sweeps that need
//! modified weights clone the parameter set and evaluate the copy, so the
//! input model is never mutated.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use crate::dataio::{DataError, Dataset};
use crate::linalg;
use crate::model::{
    ForwardOpts, Model, ModelConfig, ModelError, Params, Variant,
};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Tensor, Trans};
use crate::train::{self, AdamW, Normalization, TrainError};

use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum AnalyzeError {
    #[error("{0}")]
    Range(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> AnalyzeError {
    AnalyzeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Trace entries per recurrent step: plain and time-embedded models record
/// every block application, the auxiliary-block variants record one entry
/// per step.
fn per_step(cfg: &ModelConfig) -> usize {
    match cfg.variant {
        Variant::Base | Variant::Te => cfg.blocks,
        _ => 1,
    }
}

// -- spectral rank ---------------------------------------------------------------

/// Spectrum summary of one weight matrix.
pub struct RankReport {
    pub layer: String,
    pub threshold: f64,
    /// Smallest r whose top singular values hold `threshold` of the squared
    /// spectrum energy; 0 for an all-zero matrix.
    pub rank: usize,
    /// Full non-increasing singular value list, length min(m, n).
    pub singular_values: Vec<f64>,
}

/// Energy rank of a matrix: smallest r with sum of the top r squared
/// singular values at least `threshold` of the total. Zero matrix gives 0.
pub fn matrix_energy_rank<T: Scalar>(w: &Tensor<T>, threshold: f64) -> usize {
    assert!(
        threshold > 0.0 && threshold <= 1.0,
        "energy threshold must lie in (0, 1], got {threshold}"
    );
    linalg::energy_rank(&linalg::svd(w).s, threshold)
}

/// Full spectrum plus energy rank for one named matrix.
pub fn rank_report<T: Scalar>(layer: &str, w: &Tensor<T>, threshold: f64) -> RankReport {
    assert!(
        threshold > 0.0 && threshold <= 1.0,
        "energy threshold must lie in (0, 1], got {threshold}"
    );
    let s = linalg::svd(w).s;
    RankReport {
        layer: layer.to_string(),
        threshold,
        rank: linalg::energy_rank(&s, threshold),
        singular_values: s,
    }
}

/// Rank reports for every 2-D parameter of a model, in name order.
pub fn weight_rank_reports<T: Scalar>(model: &Model<T>, threshold: f64) -> Vec<RankReport> {
    let mut names: Vec<&str> = model
        .params
        .iter()
        .filter(|(_, t)| t.shape().len() == 2)
        .map(|(n, _)| n)
        .collect();
    names.sort_unstable();
    names
        .into_iter()
        .map(|n| rank_report(n, model.params.get(n), threshold))
        .collect()
}

pub fn rank_csv_header() -> &'static str {
    "layer,threshold,rank,min_dim"
}

pub fn rank_csv_line(r: &RankReport) -> String {
    format!(
        "{},{},{},{}",
        r.layer,
        r.threshold,
        r.rank,
        r.singular_values.len()
    )
}

// -- low-rank truncation -----------------------------------------------------------

/// Best rank-r approximation of a matrix in f64.
pub fn truncated_svd<T: Scalar>(w: &Tensor<T>, r: usize) -> Result<Tensor<f64>, AnalyzeError> {
    let sh = w.shape();
    assert_eq!(sh.len(), 2, "truncation wants a 2-D tensor, got {sh:?}");
    let k = sh[0].min(sh[1]);
    if r == 0 || r > k {
        return Err(AnalyzeError::Range(format!(
            "rank {r} outside 1..={k} for a {}x{} matrix",
            sh[0], sh[1]
        )));
    }
    Ok(linalg::truncate(&linalg::svd(w), r))
}

/// Accuracy of the model after replacing its FFN matrices with rank-r
/// approximations.
pub struct CompressionPoint {
    pub rank: usize,
    pub accuracy: f64,
}

/// Replace every FFN in/out matrix (each block, auxiliary block included)
/// with its rank-r truncation and evaluate, once per entry of `ranks`. The
/// input model is untouched; each point runs on a private copy.
pub fn svd_compression_sweep<T: Scalar>(
    model: &Model<T>,
    ranks: &[usize],
    ds: &Dataset,
    idx: &[usize],
    norm: &Normalization,
    batch_size: usize,
) -> Result<Vec<CompressionPoint>, AnalyzeError> {
    let ffn_names: Vec<String> = model
        .params
        .names()
        .filter(|n| n.ends_with("ffn.in.w") || n.ends_with("ffn.out.w"))
        .map(str::to_string)
        .collect();
    let mut points = Vec::with_capacity(ranks.len());
    for &r in ranks {
        let mut copy = Model {
            cfg: model.cfg.clone(),
            params: model.params.clone(),
        };
        for name in &ffn_names {
            let low = truncated_svd(model.params.get(name), r)?;
            copy.params.set(name, low.convert());
        }
        let (_, acc) = train::evaluate(&copy, ds, idx, norm, batch_size, None)?;
        points.push(CompressionPoint { rank: r, accuracy: acc });
    }
    Ok(points)
}

pub fn compression_csv_header() -> &'static str {
    "rank,accuracy"
}

pub fn compression_csv_line(p: &CompressionPoint) -> String {
    format!("{},{:.6}", p.rank, p.accuracy)
}

// -- attention maps ---------------------------------------------------------------

/// Class-token attention over the patch grid for one head at one step.
pub struct AttentionMap {
    /// Head index, or None for the mean over heads.
    pub head: Option<usize>,
    /// Recurrent step, 1-based.
    pub step: usize,
    /// Raw softmax weights of the class-token query onto patch tokens,
    /// [grid_h, grid_w]. Non-patch columns are dropped without
    /// renormalizing, so entries are non-negative and sum to at most 1.
    pub grid: Tensor<f64>,
    pub image_id: usize,
}

/// Attention rows of the class-token query for one image: all heads and all
/// steps in one traced forward. Row s (1-based), head h sits at
/// `rows[(s - 1) * heads + h]`, each of length token_count.
fn cls_attention_rows<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
) -> Result<Vec<Vec<Vec<f64>>>, AnalyzeError> {
    let cfg = &model.cfg;
    let b = images.shape()[0];
    let t = cfg.tokens();
    let heads = cfg.heads;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Some(&|_| false));
    let img = tape.constant(images.clone());
    let opts = ForwardOpts {
        trace: false,
        attn: true,
        ffn: false,
    };
    let out = model.forward(&mut tape, img, &bound, opts, None)?;
    let per = per_step(cfg);
    // rows[sample][ (step-1)*heads + head ] = CLS query row of length t.
    let mut rows = vec![Vec::with_capacity(cfg.steps * heads); b];
    for s in 1..=cfg.steps {
        let att = tape.value(out.attn[s * per - 1]);
        debug_assert_eq!(att.shape(), &[b * heads, t, t]);
        let data = att.data();
        for (bi, sample_rows) in rows.iter_mut().enumerate() {
            for h in 0..heads {
                let base = ((bi * heads + h) * t) * t;
                sample_rows.push(data[base..base + t].iter().map(|v| v.to_f64()).collect());
            }
        }
    }
    Ok(rows)
}

fn grid_from_row(cfg: &ModelConfig, row: &[f64]) -> Tensor<f64> {
    let lead = cfg.tokens() - cfg.patches();
    let side = cfg.image / cfg.patch;
    Tensor::new(&[side, side], row[lead..lead + cfg.patches()].to_vec())
}

/// Class-token attention map of one head at one recurrent step (1-based).
/// For multi-block stacks the step's last application is reported.
pub fn cls_attention<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    image_id: usize,
    head: usize,
    step: usize,
) -> Result<AttentionMap, AnalyzeError> {
    let cfg = &model.cfg;
    if head >= cfg.heads {
        return Err(AnalyzeError::Range(format!(
            "head {head} outside 0..{}",
            cfg.heads
        )));
    }
    if step == 0 || step > cfg.steps {
        return Err(AnalyzeError::Range(format!(
            "step {step} outside 1..={}",
            cfg.steps
        )));
    }
    let batch = single_image_batch(cfg, image);
    let rows = cls_attention_rows(model, &batch)?;
    Ok(AttentionMap {
        head: Some(head),
        step,
        grid: grid_from_row(cfg, &rows[0][(step - 1) * cfg.heads + head]),
        image_id,
    })
}

/// Head-averaged class-token attention map at one recurrent step.
pub fn mean_cls_attention<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    image_id: usize,
    step: usize,
) -> Result<AttentionMap, AnalyzeError> {
    let cfg = &model.cfg;
    if step == 0 || step > cfg.steps {
        return Err(AnalyzeError::Range(format!(
            "step {step} outside 1..={}",
            cfg.steps
        )));
    }
    let batch = single_image_batch(cfg, image);
    let rows = cls_attention_rows(model, &batch)?;
    let t = cfg.tokens();
    let mut mean = vec![0.0f64; t];
    for h in 0..cfg.heads {
        for (m, v) in mean.iter_mut().zip(&rows[0][(step - 1) * cfg.heads + h]) {
            *m += v / cfg.heads as f64;
        }
    }
    Ok(AttentionMap {
        head: None,
        step,
        grid: grid_from_row(cfg, &mean),
        image_id,
    })
}

fn single_image_batch<T: Scalar>(cfg: &ModelConfig, image: &Tensor<T>) -> Tensor<T> {
    assert_eq!(
        image.shape(),
        &[cfg.channels, cfg.image, cfg.image],
        "image shape does not match the model"
    );
    Tensor::new(
        &[1, cfg.channels, cfg.image, cfg.image],
        image.data().to_vec(),
    )
}

// -- pointing game ----------------------------------------------------------------

/// Outcome of one localization test.
pub struct Pointing {
    pub hit: bool,
    /// The mask had no foreground cell; counted as a miss.
    pub empty_mask: bool,
}

/// First position of the maximum in row-major order.
fn argmax_first(data: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    best
}

/// Whether the attention peak lands on a foreground cell of a binary grid
/// mask with the same extents. Ties pick the first maximum in row-major
/// order; an empty mask counts as a miss and is flagged.
pub fn pointing_game(map: &AttentionMap, mask: &[u8]) -> Pointing {
    assert_eq!(
        mask.len(),
        map.grid.numel(),
        "mask has {} cells, grid has {}",
        mask.len(),
        map.grid.numel()
    );
    if mask.iter().all(|&m| m == 0) {
        return Pointing {
            hit: false,
            empty_mask: true,
        };
    }
    let peak = argmax_first(map.grid.data());
    Pointing {
        hit: mask[peak] != 0,
        empty_mask: false,
    }
}

/// Reduce a per-pixel binary mask to the patch grid: a patch is foreground
/// when any of its pixels is. This max-pool favors hits identically for
/// every model under comparison.
pub fn mask_to_grid(pixels: &[u8], height: usize, width: usize, patch: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), height * width, "mask size mismatch");
    assert!(
        height % patch == 0 && width % patch == 0,
        "mask {height}x{width} not divisible by patch {patch}"
    );
    let (gh, gw) = (height / patch, width / patch);
    let mut grid = vec![0u8; gh * gw];
    for y in 0..height {
        for x in 0..width {
            if pixels[y * width + x] != 0 {
                grid[(y / patch) * gw + x / patch] = 1;
            }
        }
    }
    grid
}

/// Localization hit counts for one head at one step.
pub struct PointingRow {
    pub head: usize,
    pub step: usize,
    pub hits: usize,
    pub total: usize,
    /// Samples whose reduced mask was empty (counted in total as misses).
    pub empty: usize,
}

impl PointingRow {
    pub fn rate(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

/// Pointing-game hit ratio per head and step over a dataset with per-pixel
/// foreground masks (one height*width plane per sample, indexed like the
/// dataset).
pub fn pointing_game_rates<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    masks: &[u8],
    idx: &[usize],
    norm: &Normalization,
    batch_size: usize,
) -> Result<Vec<PointingRow>, AnalyzeError> {
    let cfg = &model.cfg;
    let plane = ds.height * ds.width;
    assert_eq!(
        masks.len(),
        ds.len() * plane,
        "expected one mask plane per sample"
    );
    let heads = cfg.heads;
    let mut rows: Vec<PointingRow> = (0..heads)
        .flat_map(|h| {
            (1..=cfg.steps).map(move |s| PointingRow {
                head: h,
                step: s,
                hits: 0,
                total: 0,
                empty: 0,
            })
        })
        .collect();
    for chunk in idx.chunks(batch_size) {
        let (images, _) = ds.batch::<T>(chunk, &norm.mean, &norm.std);
        let att_rows = cls_attention_rows(model, &images)?;
        for (bi, &sample) in chunk.iter().enumerate() {
            let grid = mask_to_grid(
                &masks[sample * plane..(sample + 1) * plane],
                ds.height,
                ds.width,
                cfg.patch,
            );
            for h in 0..heads {
                for s in 1..=cfg.steps {
                    let map = AttentionMap {
                        head: Some(h),
                        step: s,
                        grid: grid_from_row(cfg, &att_rows[bi][(s - 1) * heads + h]),
                        image_id: sample,
                    };
                    let p = pointing_game(&map, &grid);
                    let row = &mut rows[h * cfg.steps + (s - 1)];
                    row.total += 1;
                    row.hits += usize::from(p.hit);
                    row.empty += usize::from(p.empty_mask);
                }
            }
        }
    }
    Ok(rows)
}

pub fn pointing_csv_header() -> &'static str {
    "head,step,hits,total,empty,rate"
}

pub fn pointing_csv_line(r: &PointingRow) -> String {
    format!(
        "{},{},{},{},{},{:.6}",
        r.head,
        r.step,
        r.hits,
        r.total,
        r.empty,
        r.rate()
    )
}

// -- activation maximization --------------------------------------------------------

/// Result of a projected gradient ascent run.
pub struct AscentResult<T: Scalar> {
    pub image: Tensor<T>,
    pub start_objective: f64,
    pub end_objective: f64,
    /// Accepted ascent steps (at most `iters`).
    pub steps_taken: usize,
}

/// Projected gradient ascent with a backtracking step size: each iteration
/// proposes `project(x + lr * grad)` and halves the step until the objective
/// does not decrease, so the final value is never below the initial one.
/// `iters == 0` returns the start point untouched.
pub fn projected_ascent<T: Scalar>(
    x0: Tensor<T>,
    iters: usize,
    lr: f64,
    objective: &mut dyn FnMut(&Tensor<T>) -> Result<(f64, Tensor<T>), AnalyzeError>,
    project: &dyn Fn(&mut Tensor<T>),
) -> Result<AscentResult<T>, AnalyzeError> {
    let mut x = x0;
    let (mut val, mut grad) = objective(&x)?;
    let start = val;
    let mut taken = 0;
    'ascent: for _ in 0..iters {
        let mut step = lr;
        loop {
            let data: Vec<T> = x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&xv, &g)| xv + T::from_f64(step) * g)
                .collect();
            let mut cand = Tensor::new(x.shape(), data);
            project(&mut cand);
            let (cv, cg) = objective(&cand)?;
            if cv >= val {
                x = cand;
                val = cv;
                grad = cg;
                taken += 1;
                break;
            }
            step *= 0.5;
            if step < lr * 1e-9 {
                // No improving step along the gradient: stop early.
                break 'ascent;
            }
        }
    }
    Ok(AscentResult {
        image: x,
        start_objective: start,
        end_objective: val,
        steps_taken: taken,
    })
}

fn clamp01<T: Scalar>(t: &mut Tensor<T>) {
    let clamped: Vec<T> = t
        .data()
        .iter()
        .map(|v| T::from_f64(v.to_f64().clamp(0.0, 1.0)))
        .collect();
    *t = Tensor::new(t.shape(), clamped);
}

/// Synthesize an image that maximizes the mean post-activation response of
/// one FFN hidden unit over the patch tokens at a given recurrent step
/// (1-based; the step's last application for multi-block stacks), minus a
/// total-variation penalty. Pixels start as seeded uniform noise and stay
/// clamped to [0, 1]; the composite objective never decreases.
pub fn neuron_maximization<T: Scalar>(
    model: &Model<T>,
    step: usize,
    neuron: usize,
    iters: usize,
    lr: f64,
    tv_weight: f64,
    seed: u64,
) -> Result<AscentResult<T>, AnalyzeError> {
    let cfg = model.cfg.clone();
    if step == 0 || step > cfg.steps {
        return Err(AnalyzeError::Range(format!(
            "step {step} outside 1..={}",
            cfg.steps
        )));
    }
    if neuron >= cfg.ffn_dim() {
        return Err(AnalyzeError::Range(format!(
            "hidden unit {neuron} outside 0..{}",
            cfg.ffn_dim()
        )));
    }
    let (c, hw) = (cfg.channels, cfg.image);
    let mut r = stream(seed, "neuron.init");
    let x0 = Tensor::from_fn(&[c, hw, hw], |_| T::from_f64(r.gen::<f64>()));

    // Pixel-space to model-space constants, baked as full-shape tensors.
    let norm = Normalization::cifar10();
    let plane = hw * hw;
    let neg_mean = Tensor::<T>::from_fn(&[1, c, hw, hw], |i| T::from_f64(-norm.mean[i / plane % c]));
    let inv_std = Tensor::<T>::from_fn(&[1, c, hw, hw], |i| T::from_f64(1.0 / norm.std[i / plane % c]));

    let lead = cfg.tokens() - cfg.patches();
    let app = step * per_step(&cfg) - 1;
    let mut objective = move |pixels: &Tensor<T>| -> Result<(f64, Tensor<T>), AnalyzeError> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Some(&|_| false));
        let x = tape.leaf(
            Tensor::new(&[1, c, hw, hw], pixels.data().to_vec()),
            true,
        );
        let shifted = {
            let m = tape.constant(neg_mean.clone());
            tape.add(x, m)
        };
        let normed = tape.mul_const(shifted, inv_std.clone());
        let x0 = model.embed(&mut tape, normed, &bound);
        let opts = ForwardOpts {
            trace: false,
            attn: false,
            ffn: true,
        };
        let out = model.forward_tokens(&mut tape, x0, &bound, opts, None)?;
        let hidden = out.ffn[app];
        let patch_rows = tape.slice_rows(hidden, lead, cfg.patches());
        let unit = tape.slice_cols(patch_rows, neuron, 1);
        let act = tape.mean(unit);
        let obj = if tv_weight > 0.0 {
            let tv = tape.tv_loss(x);
            let penalty = tape.scale(tv, T::from_f64(-tv_weight));
            tape.add(act, penalty)
        } else {
            act
        };
        let grads = tape
            .backward(obj)
            .expect("scalar objective with one trainable leaf");
        let g = grads.get(x).expect("input image receives a gradient");
        let value = tape.value(obj).data()[0].to_f64();
        Ok((value, Tensor::new(&[c, hw, hw], g.to_vec())))
    };
    projected_ascent(x0, iters, lr, &mut objective, &clamp01)
}

// -- class-token trajectories ----------------------------------------------------------

/// Raw class-token state after each recurrent step, one [B, d] tensor per
/// step. These are the pre-classifier states before the final norm.
pub fn cls_states_per_step<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
) -> Result<Vec<Tensor<T>>, AnalyzeError> {
    let cfg = &model.cfg;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Some(&|_| false));
    let img = tape.constant(images.clone());
    let opts = ForwardOpts {
        trace: true,
        attn: false,
        ffn: false,
    };
    let out = model.forward(&mut tape, img, &bound, opts, None)?;
    let per = per_step(cfg);
    Ok((1..=cfg.steps)
        .map(|s| {
            let state = out.trace[s * per - 1];
            let cls = tape.select_token(state, 0);
            tape.value(cls).clone()
        })
        .collect())
}

/// Write one CSV row per (sample, step) holding the raw class-token state:
/// sample_id, label, step (1-based), then the d embedding values. Returns
/// the number of data rows written. Values use the shortest round-tripping
/// decimal form, so reruns on the same checkpoint are byte-identical.
pub fn export_cls_trajectories<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    idx: &[usize],
    norm: &Normalization,
    batch_size: usize,
    path: &Path,
) -> Result<usize, AnalyzeError> {
    let d = model.cfg.embed_dim;
    let mut buf = String::from("sample_id,label,step");
    for i in 0..d {
        buf.push_str(&format!(",e{i}"));
    }
    buf.push('\n');
    let mut rows = 0;
    for chunk in idx.chunks(batch_size) {
        let (images, labels) = ds.batch::<T>(chunk, &norm.mean, &norm.std);
        let states = cls_states_per_step(model, &images)?;
        for (bi, &sample) in chunk.iter().enumerate() {
            for (s, state) in states.iter().enumerate() {
                buf.push_str(&format!("{},{},{}", sample, labels[bi], s + 1));
                let row = &state.data()[bi * d..(bi + 1) * d];
                for v in row {
                    buf.push_str(&format!(",{}", v.to_f64()));
                }
                buf.push('\n');
                rows += 1;
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| io_err(path, e))?;
    Ok(rows)
}

// -- accuracy per loop depth ---------------------------------------------------------

/// Accuracy of the final classifier read out after a given number of
/// recurrent steps.
pub struct StepAccuracy {
    pub steps: usize,
    pub accuracy: f64,
}

/// The same weights with a different loop depth. Time embeddings past the
/// trained horizon reuse the final trained row, so overshoot evaluation is
/// well defined for every variant.
fn with_steps<T: Scalar>(model: &Model<T>, steps: usize) -> Model<T> {
    let mut cfg = model.cfg.clone();
    let mut params = model.params.clone();
    if cfg.steps != steps && params.contains("embed.te") {
        let te = params.get("embed.te");
        let d = te.shape()[1];
        let have = te.shape()[0];
        let ext = Tensor::from_fn(&[steps, d], |i| {
            let (row, col) = (i / d, i % d);
            te.data()[row.min(have - 1) * d + col]
        });
        // Deliberate row-count change, so bypass the shape guard.
        *params.get_mut("embed.te") = ext;
    }
    cfg.steps = steps;
    Model { cfg, params }
}

/// Classify after every loop depth t = 0..=max_steps with the final
/// classifier. Depth 0 reads the embedded state before any block runs, so
/// its class token is input-independent and accuracy sits at chance. Depths
/// past the trained horizon keep iterating the block (time embeddings clamp
/// to their last row).
pub fn stepwise_accuracy<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    idx: &[usize],
    norm: &Normalization,
    max_steps: usize,
    batch_size: usize,
) -> Result<Vec<StepAccuracy>, AnalyzeError> {
    assert!(max_steps >= 1, "need at least one step");
    let longer = with_steps(model, max_steps);
    let per = per_step(&longer.cfg);
    let mut correct = vec![0usize; max_steps + 1];
    for chunk in idx.chunks(batch_size) {
        let (images, labels) = ds.batch::<T>(chunk, &norm.mean, &norm.std);
        let mut tape = Tape::new();
        let bound = longer.bind(&mut tape, Some(&|_| false));
        let img = tape.constant(images);
        let x0 = longer.embed(&mut tape, img, &bound);
        let opts = ForwardOpts {
            trace: true,
            attn: false,
            ffn: false,
        };
        let out = longer.forward_tokens(&mut tape, x0, &bound, opts, None)?;
        for t in 0..=max_steps {
            let state = if t == 0 { x0 } else { out.trace[t * per - 1] };
            let logits = longer.classify(&mut tape, state, &bound);
            let pred = train::argmax_rows(tape.value(logits));
            correct[t] += pred
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
        }
    }
    Ok(correct
        .into_iter()
        .enumerate()
        .map(|(t, c)| StepAccuracy {
            steps: t,
            accuracy: c as f64 / idx.len() as f64,
        })
        .collect())
}

pub fn steps_csv_header() -> &'static str {
    "steps,accuracy"
}

pub fn steps_csv_line(p: &StepAccuracy) -> String {
    format!("{},{:.6}", p.steps, p.accuracy)
}

// -- linear probe -----------------------------------------------------------------

/// Accuracy of a multinomial logistic probe: a fresh linear classifier
/// trained full-batch on frozen features, evaluated on held-out features.
/// Zero-initialized and convex, so the run is deterministic.
pub fn linear_probe<T: Scalar>(
    train_x: &Tensor<T>,
    train_y: &[u8],
    eval_x: &Tensor<T>,
    eval_y: &[u8],
    classes: usize,
    epochs: usize,
    lr: f64,
) -> f64 {
    let d = train_x.last_dim();
    assert_eq!(train_x.numel() / d, train_y.len());
    assert_eq!(eval_x.numel() / d, eval_y.len());
    let mut params = Params::<T>::new();
    params.insert("probe.w", Tensor::zeros(&[d, classes]));
    params.insert("probe.b", Tensor::zeros(&[classes]));
    let targets = crate::dataio::one_hot::<T>(train_y, classes);
    let mut opt = AdamW::new(0.0);
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let w = tape.leaf(params.get("probe.w").clone(), true);
        let b = tape.leaf(params.get("probe.b").clone(), true);
        let x = tape.constant(train_x.clone());
        let logits = tape.mm(x, Trans::N, w, Trans::N);
        let logits = tape.add_bias(logits, b);
        let loss = tape.ce_with_q(logits, targets.clone());
        let grads = tape.backward(loss).expect("probe loss is scalar");
        let mut gm: HashMap<String, Vec<f64>> = HashMap::new();
        let to64 = |g: &[T]| g.iter().map(|v| v.to_f64()).collect();
        gm.insert("probe.w".into(), to64(grads.get(w).expect("trainable")));
        gm.insert("probe.b".into(), to64(grads.get(b).expect("trainable")));
        opt.step(&mut params, &gm, lr);
    }
    let mut tape = Tape::new();
    let w = tape.leaf(params.get("probe.w").clone(), false);
    let b = tape.leaf(params.get("probe.b").clone(), false);
    let x = tape.constant(eval_x.clone());
    let logits = tape.mm(x, Trans::N, w, Trans::N);
    let logits = tape.add_bias(logits, b);
    let pred = train::argmax_rows(tape.value(logits));
    let hits = pred.iter().zip(eval_y).filter(|(p, l)| p == l).count();
    hits as f64 / eval_y.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_shapes;
    use crate::model::ModelConfig;
    use crate::rng::stream;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image: 16,
            patch: 8,
            channels: 3,
            classes: 10,
            embed_dim: 24,
            heads: 2,
            blocks: 1,
            steps: 3,
            ..ModelConfig::tiny()
        }
    }

    fn shapes_cfg() -> ModelConfig {
        ModelConfig {
            image: 32,
            patch: 8,
            channels: 3,
            classes: 10,
            embed_dim: 24,
            heads: 2,
            blocks: 1,
            steps: 2,
            ..ModelConfig::tiny()
        }
    }

    fn random_matrix(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = stream(seed, "analyze.test.matrix");
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn energy_rank_reference_values() {
        let eye = Tensor::from_fn(&[768, 768], |i| {
            if i / 768 == i % 768 {
                1.0f64
            } else {
                0.0
            }
        });
        assert_eq!(matrix_energy_rank(&eye, 0.95), 730);

        let rank1 = Tensor::from_fn(&[6, 5], |i| ((i / 5 + 1) * (i % 5 + 1)) as f64);
        assert_eq!(matrix_energy_rank(&rank1, 0.95), 1);

        let diag = Tensor::from_fn(&[2, 2], |i| match i {
            0 => 10.0f64,
            3 => 1.0,
            _ => 0.0,
        });
        // Energy split 100 : 1, and 100/101 already clears 0.95.
        assert_eq!(matrix_energy_rank(&diag, 0.95), 1);
        assert_eq!(matrix_energy_rank(&diag, 0.999), 2);

        let zero = Tensor::<f64>::zeros(&[4, 4]);
        assert_eq!(matrix_energy_rank(&zero, 0.95), 0);
    }

    #[test]
    fn energy_rank_full_threshold_is_numeric_rank_and_monotone() {
        // Exact rank-3 product of random factors.
        let a = random_matrix(&[8, 3], 1);
        let b = random_matrix(&[3, 8], 2);
        let mut prod = vec![0.0f64; 64];
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..3 {
                    prod[i * 8 + j] += a.data()[i * 3 + k] * b.data()[k * 8 + j];
                }
            }
        }
        let m = Tensor::new(&[8, 8], prod);
        assert_eq!(matrix_energy_rank(&m, 1.0), 3);

        let r = random_matrix(&[7, 5], 3);
        let mut last = 0;
        for thr in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 1.0] {
            let rank = matrix_energy_rank(&r, thr);
            assert!(rank >= last, "rank fell from {last} to {rank} at {thr}");
            last = rank;
        }
        assert_eq!(last, 5);
    }

    #[test]
    fn truncation_matches_tail_energy() {
        let m = random_matrix(&[8, 8], 4);
        let svd = linalg::svd(&m);
        for r in 1..=8usize {
            let low = truncated_svd(&m, r).unwrap();
            let err = linalg::frobenius_diff(&m, &low);
            let tail: f64 = svd.s[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!(
                (err - tail).abs() < 1e-9,
                "r={r}: error {err} vs tail {tail}"
            );
        }
        // Full rank reproduces the matrix.
        let full = truncated_svd(&m, 8).unwrap();
        assert!(linalg::frobenius_diff(&m, &full) < 1e-9);

        assert!(matches!(
            truncated_svd(&m, 0),
            Err(AnalyzeError::Range(_))
        ));
        assert!(matches!(
            truncated_svd(&m, 9),
            Err(AnalyzeError::Range(_))
        ));
    }

    #[test]
    fn truncation_beats_random_candidates() {
        let m = random_matrix(&[5, 4], 5);
        let best = truncated_svd(&m, 2).unwrap();
        let opt = linalg::frobenius_diff(&m, &best);
        let mut r = stream(6, "analyze.test.candidates");
        for _ in 0..200 {
            // Random rank-2 candidate with the best least-squares scale.
            let u: Vec<f64> = (0..10).map(|_| r.gen_range(-1.0f64..1.0)).collect();
            let v: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0f64..1.0)).collect();
            let mut cand = vec![0.0f64; 20];
            for i in 0..5 {
                for j in 0..4 {
                    for k in 0..2 {
                        cand[i * 4 + j] += u[i * 2 + k] * v[k * 4 + j];
                    }
                }
            }
            let (mut dot, mut nrm) = (0.0, 0.0);
            for (x, c) in m.data().iter().zip(&cand) {
                dot += x * c;
                nrm += c * c;
            }
            let alpha = if nrm > 0.0 { dot / nrm } else { 0.0 };
            let mut err = 0.0;
            for (x, c) in m.data().iter().zip(&cand) {
                let d = x - alpha * c;
                err += d * d;
            }
            assert!(opt <= err.sqrt() + 1e-12);
        }
    }

    #[test]
    fn rank_reports_cover_every_matrix() {
        let m = Model::<f32>::init(tiny_cfg(), 7).unwrap();
        let reports = weight_rank_reports(&m, 0.95);
        assert!(reports.iter().any(|r| r.layer == "block0.ffn.in.w"));
        for r in &reports {
            let k = r.singular_values.len();
            assert!(r.rank >= 1 && r.rank <= k, "{}: rank {}", r.layer, r.rank);
            assert_eq!(rank_csv_line(r).split(',').count(), 4);
        }
        assert_eq!(rank_csv_header().split(',').count(), 4);
    }

    #[test]
    fn compression_sweep_leaves_weights_alone() {
        let cfg = shapes_cfg();
        let model = Model::<f32>::init(cfg, 11).unwrap();
        let before: Vec<(String, Vec<f32>)> = model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect();
        let (ds, _) = synth_shapes(40, 21);
        let idx: Vec<usize> = (0..40).collect();
        let norm = Normalization::from_dataset(&ds);
        let d = model.cfg.embed_dim;
        let points =
            svd_compression_sweep(&model, &[d / 4, d], &ds, &idx, &norm, 16).unwrap();
        assert_eq!(points.len(), 2);

        // Full rank reproduces the baseline accuracy.
        let (_, base_acc) = train::evaluate(&model, &ds, &idx, &norm, 16, None).unwrap();
        assert!(
            (points[1].accuracy - base_acc).abs() < 1e-4,
            "full-rank point {} vs baseline {base_acc}",
            points[1].accuracy
        );

        // The input model is bitwise untouched.
        for (name, data) in &before {
            assert_eq!(model.params.get(name).data(), &data[..], "{name} changed");
        }
        assert_eq!(compression_csv_line(&points[0]).split(',').count(), 2);
    }

    #[test]
    fn attention_grid_shape_and_uniform_case() {
        // Single-patch geometry collapses to a 1x1 grid.
        let mut cfg = tiny_cfg();
        cfg.image = 8;
        let m = Model::<f32>::init(cfg.clone(), 13).unwrap();
        let img = Tensor::from_fn(&[3, 8, 8], |i| (i % 7) as f32 / 7.0);
        let map = cls_attention(&m, &img, 0, 1, 1).unwrap();
        assert_eq!(map.grid.shape(), &[1, 1]);

        // Zeroed attention projections give identical scores, so softmax is
        // uniform over all tokens: every grid cell is 1/token_count.
        let mut cfg = tiny_cfg();
        cfg.image = 16;
        let mut m = Model::<f32>::init(cfg.clone(), 14).unwrap();
        m.params
            .set("block0.attn.qkv.w", Tensor::zeros(&[cfg.embed_dim, 3 * cfg.embed_dim]));
        m.params.set("block0.attn.qkv.b", Tensor::zeros(&[3 * cfg.embed_dim]));
        let img = Tensor::from_fn(&[3, 16, 16], |i| (i % 11) as f32 / 11.0);
        let map = cls_attention(&m, &img, 0, 0, 2).unwrap();
        assert_eq!(map.grid.shape(), &[2, 2]);
        let want = 1.0 / cfg.tokens() as f64;
        for &v in map.grid.data() {
            assert!((v - want).abs() < 1e-6, "{v} vs uniform {want}");
        }

        // Head-averaged map of a uniform model is uniform too.
        let mean = mean_cls_attention(&m, &img, 0, 2).unwrap();
        assert!(mean.head.is_none());
        for &v in mean.grid.data() {
            assert!((v - want).abs() < 1e-6);
        }

        // All weights are probabilities.
        let m2 = Model::<f32>::init(cfg, 15).unwrap();
        let map2 = cls_attention(&m2, &img, 0, 1, 1).unwrap();
        let sum: f64 = map2.grid.data().iter().sum();
        assert!(map2.grid.data().iter().all(|&v| v >= 0.0));
        assert!(sum <= 1.0 + 1e-6);

        assert!(matches!(
            cls_attention(&m2, &img, 0, 9, 1),
            Err(AnalyzeError::Range(_))
        ));
        assert!(matches!(
            cls_attention(&m2, &img, 0, 0, 4),
            Err(AnalyzeError::Range(_))
        ));
    }

    fn map_with(grid: Vec<f64>, rows: usize, cols: usize) -> AttentionMap {
        AttentionMap {
            head: Some(0),
            step: 1,
            grid: Tensor::new(&[rows, cols], grid),
            image_id: 0,
        }
    }

    #[test]
    fn pointing_game_reference_cases() {
        // Peak at (2, 3) of a 4x4 grid; mask covering column 3 hits.
        let mut g = vec![0.01f64; 16];
        g[2 * 4 + 3] = 0.5;
        let map = map_with(g, 4, 4);
        let col3: Vec<u8> = (0..16).map(|i| u8::from(i % 4 == 3)).collect();
        assert!(pointing_game(&map, &col3).hit);

        // All-ones mask always hits; a mask missing the peak misses.
        assert!(pointing_game(&map, &[1u8; 16]).hit);
        let col0: Vec<u8> = (0..16).map(|i| u8::from(i % 4 == 0)).collect();
        assert!(!pointing_game(&map, &col0).hit);

        // Empty mask is a flagged miss.
        let p = pointing_game(&map, &[0u8; 16]);
        assert!(!p.hit && p.empty_mask);

        // Ties resolve to the first maximum in row-major order.
        let flat = map_with(vec![0.25; 4], 2, 2);
        assert!(pointing_game(&flat, &[1, 0, 0, 0]).hit);
        assert!(!pointing_game(&flat, &[0, 1, 1, 1]).hit);
    }

    #[test]
    fn pixel_masks_reduce_by_max_pooling() {
        let mut pixels = vec![0u8; 32 * 32];
        pixels[9 * 32 + 17] = 1;
        let grid = mask_to_grid(&pixels, 32, 32, 8);
        assert_eq!(grid.len(), 16);
        for (i, &v) in grid.iter().enumerate() {
            assert_eq!(v, u8::from(i == 4 + 2), "cell {i}");
        }
    }

    #[test]
    fn pointing_rates_with_full_masks_hit_everywhere() {
        let cfg = shapes_cfg();
        let m = Model::<f32>::init(cfg.clone(), 17).unwrap();
        let (ds, _) = synth_shapes(12, 23);
        let norm = Normalization::from_dataset(&ds);
        let ones = vec![1u8; ds.len() * ds.height * ds.width];
        let idx: Vec<usize> = (0..12).collect();
        let rows = pointing_game_rates(&m, &ds, &ones, &idx, &norm, 5).unwrap();
        assert_eq!(rows.len(), cfg.heads * cfg.steps);
        for r in &rows {
            assert_eq!(r.total, 12);
            assert_eq!(r.hits, 12);
            assert_eq!(r.empty, 0);
            assert!((r.rate() - 1.0).abs() < 1e-12);
            assert_eq!(pointing_csv_line(r).split(',').count(), 6);
        }

        // Real shape masks produce well-formed counts.
        let (ds2, masks) = synth_shapes(12, 23);
        let rows = pointing_game_rates(&m, &ds2, &masks, &idx, &norm, 5).unwrap();
        for r in &rows {
            assert!(r.hits <= r.total);
        }
    }

    #[test]
    fn ascent_on_a_linear_functional_finds_the_weight_direction() {
        // Maximizing <w, x> over the unit ball has the closed-form optimum
        // w / |w|; projected ascent must align with it.
        let mut r = stream(31, "analyze.test.linear");
        let w: Vec<f64> = (0..24).map(|_| r.gen_range(-1.0f64..1.0)).collect();
        let w_t = Tensor::new(&[24], w.clone());
        let x0 = Tensor::from_fn(&[24], |_| r.gen_range(-0.1f64..0.1));
        let mut objective = |x: &Tensor<f64>| {
            let v: f64 = x.data().iter().zip(&w).map(|(a, b)| a * b).sum();
            Ok((v, w_t.clone()))
        };
        let project = |t: &mut Tensor<f64>| {
            let n: f64 = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1.0 {
                let scaled: Vec<f64> = t.data().iter().map(|v| v / n).collect();
                *t = Tensor::new(t.shape(), scaled);
            }
        };
        let res = projected_ascent(x0, 60, 0.5, &mut objective, &project).unwrap();
        let dot: f64 = res.image.data().iter().zip(&w).map(|(a, b)| a * b).sum();
        let nx: f64 = res.image.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nw: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = dot / (nx * nw);
        assert!(cos >= 0.99, "cosine {cos}");
        assert!(res.end_objective >= res.start_objective);
    }

    #[test]
    fn neuron_ascent_contract() {
        let cfg = tiny_cfg();
        let m = Model::<f32>::init(cfg.clone(), 19).unwrap();

        // Zero iterations return the seeded noise untouched.
        let frozen = neuron_maximization(&m, 2, 3, 0, 0.1, 1e-3, 77).unwrap();
        let mut r = stream(77, "neuron.init");
        let want = Tensor::<f32>::from_fn(&[3, 16, 16], |_| f32::from_f64(r.gen::<f64>()));
        assert_eq!(frozen.image.data(), want.data());
        assert_eq!(frozen.steps_taken, 0);

        // A short run never decreases the composite objective and keeps
        // pixels in range.
        let res = neuron_maximization(&m, 2, 3, 4, 0.5, 1e-3, 77).unwrap();
        assert!(res.end_objective >= res.start_objective);
        assert!(res
            .image
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        assert!(res.end_objective > frozen.end_objective || res.steps_taken == 0);

        assert!(matches!(
            neuron_maximization(&m, 0, 0, 1, 0.1, 0.0, 1),
            Err(AnalyzeError::Range(_))
        ));
        assert!(matches!(
            neuron_maximization(&m, 1, cfg.ffn_dim(), 1, 0.1, 0.0, 1),
            Err(AnalyzeError::Range(_))
        ));
    }

    #[test]
    fn trajectories_round_trip() {
        let cfg = shapes_cfg();
        let m = Model::<f32>::init(cfg.clone(), 29).unwrap();
        let (ds, _) = synth_shapes(10, 37);
        let norm = Normalization::from_dataset(&ds);
        let idx: Vec<usize> = (0..10).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let rows = export_cls_trajectories(&m, &ds, &idx, &norm, 4, &path).unwrap();
        assert_eq!(rows, 10 * cfg.steps);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + rows);
        assert!(lines[0].starts_with("sample_id,label,step,e0,"));
        assert_eq!(lines[0].split(',').count(), 3 + cfg.embed_dim);

        // The final-step row matches the class token of a plain forward.
        let (images, _) = ds.batch::<f32>(&[0], &norm.mean, &norm.std);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, Some(&|_| false));
        let img = tape.constant(images);
        let out = m
            .forward(&mut tape, img, &bound, ForwardOpts::default(), None)
            .unwrap();
        let cls = tape.select_token(out.tokens, 0);
        let want = tape.value(cls).data().to_vec();
        let last: Vec<f64> = lines[cfg.steps]
            .split(',')
            .skip(3)
            .map(|v| v.parse().unwrap())
            .collect();
        for (a, b) in want.iter().zip(&last) {
            assert!((a.to_f64() - b).abs() < 1e-6);
        }

        // Reruns are byte-identical.
        let path2 = dir.path().join("traj2.csv");
        export_cls_trajectories(&m, &ds, &idx, &norm, 4, &path2).unwrap();
        assert_eq!(text, std::fs::read_to_string(&path2).unwrap());
    }

    #[test]
    fn stepwise_accuracy_brackets_the_standard_evaluation() {
        let cfg = shapes_cfg();
        let m = Model::<f32>::init(cfg.clone(), 41).unwrap();
        let (ds, _) = synth_shapes(100, 43);
        let norm = Normalization::from_dataset(&ds);
        let idx: Vec<usize> = (0..100).collect();
        let curve = stepwise_accuracy(&m, &ds, &idx, &norm, cfg.steps, 25).unwrap();
        assert_eq!(curve.len(), cfg.steps + 1);

        // Depth 0 classifies an input-independent token: exactly chance on
        // this class-balanced split.
        assert!(
            (curve[0].accuracy - 0.1).abs() <= 0.01,
            "depth-0 accuracy {}",
            curve[0].accuracy
        );

        // Depth S equals the standard evaluation bit for bit.
        let (_, acc) = train::evaluate(&m, &ds, &idx, &norm, 25, None).unwrap();
        assert_eq!(curve[cfg.steps].accuracy, acc);
        assert_eq!(steps_csv_line(&curve[0]).split(',').count(), 2);
    }

    #[test]
    fn stepwise_accuracy_overshoots_every_variant() {
        let (ds, _) = synth_shapes(20, 47);
        let norm = Normalization::from_dataset(&ds);
        let idx: Vec<usize> = (0..20).collect();
        for variant in ["base", "te", "fl", "sc"] {
            let mut cfg = shapes_cfg();
            cfg.variant = match variant {
                "base" => Variant::Base,
                "te" => Variant::Te,
                "fl" => Variant::Fl { n: 2, tied: true },
                _ => Variant::Sc { n: 2, tied: true },
            };
            cfg.steps = 3;
            let m = Model::<f32>::init(cfg.clone(), 53).unwrap();
            let curve = stepwise_accuracy(&m, &ds, &idx, &norm, 6, 10).unwrap();
            assert_eq!(curve.len(), 7, "{variant}");
            // The prefix is unchanged by running longer.
            let short = stepwise_accuracy(&m, &ds, &idx, &norm, 3, 10).unwrap();
            for t in 0..=3 {
                assert_eq!(curve[t].accuracy, short[t].accuracy, "{variant} t={t}");
            }
        }
    }

    #[test]
    fn linear_probe_separates_a_linear_toy() {
        // Features drawn around class-specific means, linearly separable.
        let mut r = stream(59, "analyze.test.probe");
        let k = 4;
        let d = 6;
        let gen = |n: usize, r: &mut rand_chacha::ChaCha8Rng| {
            let mut xs = Vec::with_capacity(n * d);
            let mut ys = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % k;
                for j in 0..d {
                    let center = if j == c { 3.0 } else { 0.0 };
                    xs.push(center + r.gen_range(-0.5..0.5));
                }
                ys.push(c as u8);
            }
            (Tensor::<f64>::new(&[n, d], xs), ys)
        };
        let (tx, ty) = gen(80, &mut r);
        let (ex, ey) = gen(40, &mut r);
        let acc = linear_probe(&tx, &ty, &ex, &ey, k, 200, 0.05);
        assert_eq!(acc, 1.0, "probe accuracy {acc}");

        // Untrained probe predicts a constant class.
        let chance = linear_probe(&tx, &ty, &ex, &ey, k, 0, 0.05);
        assert!((chance - 0.25).abs() < 0.01);
    }
}
