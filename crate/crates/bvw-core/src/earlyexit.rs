//! Intermediate classifiers on the recurrent state, a confidence-aware
//! training objective, and threshold-based adaptive inference.
//!
//! Each exit head is a single linear layer reading the normalized class token
//! after a chosen recurrent step. A sample leaves at the first configured
//! step whose head is confident enough (max softmax >= threshold); thresholds
//! >= 1 disable early exits, running through the last configured step and
//! predicting with the last head.
//!
//! The desk-scale implementation always computes the full trace and applies
//! the policy to cached per-step features, which is bitwise identical to
//! stopping each sample individually (rows never interact). Reported FLOPs
//! are the analytic cost of the steps and head evaluations the policy would
//! have executed.

use std::collections::HashMap;

use crate::dataio::{one_hot, permutation, Dataset};
use crate::model::{self, Bound, ForwardOpts, Model, ModelConfig, ModelError, Params, Variant};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor, Trans};
use crate::train::{argmax_rows, AdamW, Normalization};

#[derive(Debug, thiserror::Error)]
pub enum ExitError {
    #[error("bad exit step configuration: {0}")]
    Steps(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Numerically stable log-sum-exp of one logit row: the confidence score
/// attached to a prediction.
pub fn energy_confidence<T: Scalar>(logits: &[T]) -> f64 {
    assert!(!logits.is_empty(), "empty logit row");
    let m = logits
        .iter()
        .map(|x| x.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|x| (x.to_f64() - m).exp()).sum();
    m + s.ln()
}

fn validate_steps(steps: &[usize], max_step: usize) -> Result<(), ExitError> {
    if steps.is_empty() {
        return Err(ExitError::Steps("no exit steps".into()));
    }
    for w in steps.windows(2) {
        if w[1] <= w[0] {
            return Err(ExitError::Steps(format!(
                "steps must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    if steps[0] < 1 || *steps.last().unwrap() > max_step {
        return Err(ExitError::Steps(format!(
            "steps must lie in 1..={max_step}, got {steps:?}"
        )));
    }
    Ok(())
}

/// Linear classifiers attached to a subset of recurrent steps.
pub struct ExitHeads {
    steps: Vec<usize>,
    pub params: Params<f32>,
    classes: usize,
    embed_dim: usize,
}

impl ExitHeads {
    /// The default placement: the upper half of the schedule, ending at the
    /// final step (S=12 gives 6..=12, S=6 gives 3..=6).
    pub fn default_steps(s: usize) -> Vec<usize> {
        ((s / 2).max(1)..=s).collect()
    }

    pub fn init(cfg: &ModelConfig, steps: Vec<usize>, seed: u64) -> Result<Self, ExitError> {
        validate_steps(&steps, cfg.steps)?;
        let mut params = Params::new();
        for &s in &steps {
            let wname = format!("exit{s}.w");
            let mut r = stream(seed, &wname);
            params.insert(
                &wname,
                model::trunc_normal(&[cfg.embed_dim, cfg.classes], 0.02, &mut r),
            );
            params.insert(&format!("exit{s}.b"), Tensor::zeros(&[cfg.classes]));
        }
        Ok(ExitHeads {
            steps,
            params,
            classes: cfg.classes,
            embed_dim: cfg.embed_dim,
        })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// FLOPs of evaluating one head on one sample.
    pub fn head_flops(&self) -> u64 {
        2 * self.embed_dim as u64 * self.classes as u64
    }

    /// Head logits for cached features [B, d] of this head's step.
    fn logits_var(&self, tape: &mut Tape<f32>, feats: Var, step: usize, bound: &Bound) -> Var {
        let w = bound.var(&format!("exit{step}.w"));
        let b = bound.var(&format!("exit{step}.b"));
        let l = tape.mm(feats, Trans::N, w, Trans::N);
        tape.add_bias(l, b)
    }

    /// Plain-tensor head logits (inference path).
    pub fn logits(&self, feats: &Tensor<f32>, step: usize) -> Tensor<f32> {
        let w = self.params.get(&format!("exit{step}.w"));
        let b = self.params.get(&format!("exit{step}.b"));
        let l = tensor::mm(feats, Trans::N, w, Trans::N);
        tensor::add_bias(&l, b)
    }

    fn bind(&self, tape: &mut Tape<f32>) -> Bound {
        let mut vars = HashMap::new();
        for (name, t) in self.params.iter() {
            vars.insert(name.to_string(), tape.leaf(t.clone(), true));
        }
        Bound::from_vars(vars)
    }
}

/// Threshold plus the ordered steps at which heads may fire.
pub struct ExitPolicy {
    pub threshold: f64,
    pub steps: Vec<usize>,
}

impl ExitPolicy {
    pub fn new(threshold: f64, steps: Vec<usize>, max_step: usize) -> Result<Self, ExitError> {
        if !(threshold >= 0.0) {
            return Err(ExitError::Steps(format!(
                "threshold must be >= 0, got {threshold}"
            )));
        }
        validate_steps(&steps, max_step)?;
        Ok(ExitPolicy { threshold, steps })
    }
}

/// Block applications executed by running recurrent steps 1..=i.
pub fn applications_through_step(cfg: &ModelConfig, i: usize) -> u64 {
    let i = i as u64;
    match cfg.variant {
        Variant::Base | Variant::Te => cfg.blocks as u64 * i,
        Variant::Fl { n, .. } => i * (n as u64 + 1),
        Variant::Sc { n, .. } => i + i.div_ceil(n as u64),
    }
}

/// Normalized class-token features after each requested recurrent step, in
/// the order given. One full forward; rows of the output align with the
/// batch.
pub fn features_at_steps(
    model: &Model<f32>,
    images: &Tensor<f32>,
    steps: &[usize],
) -> Result<Vec<Tensor<f32>>, ExitError> {
    validate_steps(steps, model.cfg.steps)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Some(&|_| false));
    let img = tape.constant(images.clone());
    let opts = ForwardOpts {
        trace: true,
        attn: false,
        ffn: false,
    };
    let out = model.forward(&mut tape, img, &bound, opts, None)?;
    // Base/te traces record every block application; fl/sc record once per
    // recurrent step.
    let per_step = match model.cfg.variant {
        Variant::Base | Variant::Te => model.cfg.blocks,
        _ => 1,
    };
    let mut feats = Vec::with_capacity(steps.len());
    for &s in steps {
        let state = out.trace[s * per_step - 1];
        let f = model.cls_features(&mut tape, state, &bound);
        feats.push(tape.value(f).clone());
    }
    Ok(feats)
}

/// Confidence-aware objective over all heads: (1-alpha) cross-entropy plus
/// alpha times the mean sigmoid of energy(misclassified) - energy(correct),
/// pushing the confidence score to separate right from wrong predictions.
/// Heads whose batch lacks either outcome contribute only cross-entropy.
pub fn ce_auroc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    head_logits: &[Var],
    labels: &[u8],
    classes: usize,
    alpha: f64,
) -> Var {
    assert!(!head_logits.is_empty(), "no heads");
    assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0,1]");
    let q = one_hot::<T>(labels, classes);
    let mut total: Option<Var> = None;
    for &logits in head_logits {
        let ce = tape.ce_with_q(logits, q.clone());
        let ce = tape.scale(ce, T::from_f64(1.0 - alpha));
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce),
        });
        if alpha == 0.0 {
            continue;
        }
        let preds = argmax_rows(tape.value(logits));
        let pos: Vec<usize> = (0..labels.len()).filter(|&i| preds[i] == labels[i]).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&i| preds[i] != labels[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let e = tape.logsumexp_rows(logits);
        let ep = tape.gather(e, &pos);
        let en = tape.gather(e, &neg);
        let diff = tape.outer_diff(en, ep);
        let sg = tape.sigmoid(diff);
        let pair = tape.mean(sg);
        let pair = tape.scale(pair, T::from_f64(alpha));
        total = Some(tape.add(total.unwrap(), pair));
    }
    total.unwrap()
}

pub struct HeadTrainReport {
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train the exit heads on frozen-backbone features. The backbone is only
/// read; heads see the normalized class token of their step.
#[allow(clippy::too_many_arguments)]
pub fn train_exit_heads(
    model: &Model<f32>,
    heads: &mut ExitHeads,
    ds: &Dataset,
    idx: &[usize],
    norm: &Normalization,
    epochs: usize,
    lr: f64,
    alpha: f64,
    batch_size: usize,
    seed: u64,
) -> Result<HeadTrainReport, ExitError> {
    // Cache features once: the backbone never changes under this procedure.
    let steps = heads.steps.clone();
    let n = idx.len();
    let d = heads.embed_dim;
    let mut cached: Vec<Vec<f32>> = vec![vec![0.0; n * d]; steps.len()];
    let mut labels = vec![0u8; n];
    for (start, chunk) in idx.chunks(batch_size.max(1)).enumerate().map(|(i, c)| (i * batch_size.max(1), c)) {
        let (images, ls) = ds.batch::<f32>(chunk, &norm.mean, &norm.std);
        let feats = features_at_steps(model, &images, &steps)?;
        for (si, f) in feats.iter().enumerate() {
            cached[si][start * d..(start + chunk.len()) * d].copy_from_slice(f.data());
        }
        labels[start..start + chunk.len()].copy_from_slice(&ls);
    }

    let mut opt = AdamW::new(0.0);
    let mut report = HeadTrainReport {
        epoch_losses: Vec::new(),
    };
    for epoch in 0..epochs {
        let mut shuffle = stream(seed, &format!("exit.epoch{epoch}.shuffle"));
        let order = permutation(n, &mut shuffle);
        let mut loss_sum = 0.0;
        for batch in order.chunks(batch_size.max(1)) {
            let bl: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = heads.bind(&mut tape);
            let mut logit_vars = Vec::with_capacity(steps.len());
            for (si, &s) in steps.iter().enumerate() {
                let mut fdata = Vec::with_capacity(batch.len() * d);
                for &i in batch {
                    fdata.extend_from_slice(&cached[si][i * d..(i + 1) * d]);
                }
                let f = tape.constant(Tensor::new(&[batch.len(), d], fdata));
                logit_vars.push(heads.logits_var(&mut tape, f, s, &bound));
            }
            let loss = ce_auroc_loss(&mut tape, &logit_vars, &bl, heads.classes, alpha);
            loss_sum += tape.value(loss).item() as f64 * batch.len() as f64;
            let grads = tape.backward(loss).expect("scalar loss");
            let mut gmap: HashMap<String, Vec<f64>> = HashMap::new();
            for (name, var) in bound.iter() {
                if let Some(g) = grads.get(var) {
                    gmap.insert(name.to_string(), g.iter().map(|&x| x as f64).collect());
                }
            }
            opt.step(&mut heads.params, &gmap, lr);
        }
        report.epoch_losses.push(loss_sum / n as f64);
    }
    Ok(report)
}

/// Per-sample outcome of adaptive inference.
pub struct ExitOutcome {
    pub predictions: Vec<u8>,
    pub exit_steps: Vec<usize>,
    /// Analytic dense-linear FLOPs the policy's execution would cost.
    pub flops: Vec<u64>,
    pub heads_evaluated: Vec<usize>,
}

/// Run the policy over a batch. Thresholds >= 1 disable exits: the batch runs
/// through the last configured step and the last head predicts.
pub fn infer_early_exit(
    model: &Model<f32>,
    heads: &ExitHeads,
    policy: &ExitPolicy,
    images: &Tensor<f32>,
) -> Result<ExitOutcome, ExitError> {
    for s in &policy.steps {
        if !heads.steps.contains(s) {
            return Err(ExitError::Steps(format!("no trained head at step {s}")));
        }
    }
    let feats = features_at_steps(model, images, &policy.steps)?;
    let b = images.shape()[0];
    let k = heads.classes;
    let app = model::application_linear_flops(&model.cfg);
    let embed = model::embed_flops(&model.cfg);
    let logits: Vec<Tensor<f32>> = policy
        .steps
        .iter()
        .zip(&feats)
        .map(|(&s, f)| heads.logits(f, s))
        .collect();
    let probs: Vec<Tensor<f32>> = logits.iter().map(tensor::softmax_last).collect();

    let mut out = ExitOutcome {
        predictions: vec![0; b],
        exit_steps: vec![0; b],
        flops: vec![0; b],
        heads_evaluated: vec![0; b],
    };
    let last = policy.steps.len() - 1;
    for i in 0..b {
        let (choice, evaluated) = if policy.threshold >= 1.0 {
            (last, 1)
        } else {
            let mut fired = None;
            for (hi, p) in probs.iter().enumerate() {
                let row = &p.data()[i * k..(i + 1) * k];
                let conf = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                if conf >= policy.threshold {
                    fired = Some(hi);
                    break;
                }
            }
            match fired {
                Some(hi) => (hi, hi + 1),
                None => (last, policy.steps.len()),
            }
        };
        let row = &logits[choice].data()[i * k..(i + 1) * k];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        let step = policy.steps[choice];
        out.predictions[i] = best as u8;
        out.exit_steps[i] = step;
        out.heads_evaluated[i] = evaluated;
        out.flops[i] = embed
            + applications_through_step(&model.cfg, step) * app
            + evaluated as u64 * heads.head_flops();
    }
    Ok(out)
}

/// One row of the threshold sweep the CLI prints.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub tau: f64,
    pub accuracy: f64,
    pub mean_gflops: f64,
    pub mean_ms: f64,
    pub mean_exit_step: f64,
}

pub fn sweep_csv_header() -> &'static str {
    "tau,accuracy,mean_gflops,mean_ms,mean_exit_step"
}

pub fn sweep_csv_line(r: &SweepRow) -> String {
    format!(
        "{},{:.6},{:.6},{:.4},{:.4}",
        r.tau, r.accuracy, r.mean_gflops, r.mean_ms, r.mean_exit_step
    )
}

/// Evaluate the policy at each threshold over a dataset slice.
pub fn threshold_sweep(
    model: &Model<f32>,
    heads: &ExitHeads,
    steps: &[usize],
    taus: &[f64],
    ds: &Dataset,
    idx: &[usize],
    norm: &Normalization,
    batch_size: usize,
) -> Result<Vec<SweepRow>, ExitError> {
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let policy = ExitPolicy::new(tau, steps.to_vec(), model.cfg.steps)?;
        let mut correct = 0usize;
        let mut flops_sum = 0u64;
        let mut step_sum = 0usize;
        let t0 = std::time::Instant::now();
        for chunk in idx.chunks(batch_size.max(1)) {
            let (images, labels) = ds.batch::<f32>(chunk, &norm.mean, &norm.std);
            let out = infer_early_exit(model, heads, &policy, &images)?;
            correct += out
                .predictions
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            flops_sum += out.flops.iter().sum::<u64>();
            step_sum += out.exit_steps.iter().sum::<usize>();
        }
        let n = idx.len() as f64;
        rows.push(SweepRow {
            tau,
            accuracy: correct as f64 / n,
            mean_gflops: flops_sum as f64 / n / 1e9,
            mean_ms: t0.elapsed().as_secs_f64() * 1e3 / n,
            mean_exit_step: step_sum as f64 / n,
        });
    }
    Ok(rows)
}
