//! Finite-difference verification of reverse-mode gradients.
//!
//! For each parameter tensor, a handful of coordinates are perturbed by ±h
//! and the loss re-evaluated; the central difference is compared against the
//! tape's gradient. Everything runs in f64 so discretization, not precision,
//! dominates the error.

use crate::model::{Bound, Model};
use crate::tape::{Tape, Var};

/// Worst relative error observed for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

/// Build the scalar loss for a bound model on a fresh tape.
pub type LossBuilder<'a> = dyn Fn(&Model<f64>, &mut Tape<f64>, &Bound) -> Var + 'a;

fn eval_loss(model: &Model<f64>, build: &LossBuilder<'_>) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Some(&|_| false));
    let out = build(model, &mut tape, &bound);
    tape.value(out).item()
}

/// Check every parameter tensor of `model` against central differences.
///
/// `coords_per_param` coordinates are sampled evenly across each tensor. The
/// relative error denominator is max(|ad|, |fd|, 1e-6), so agreement on
/// near-zero gradients is judged absolutely at the 1e-6 scale.
pub fn check_grads(
    model: &Model<f64>,
    build: &LossBuilder<'_>,
    coords_per_param: usize,
    h: f64,
) -> Vec<GradReport> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, None);
    let out = build(model, &mut tape, &bound);
    let grads = tape.backward(out).expect("loss must be scalar");

    let mut reports = Vec::new();
    for (name, tensor) in model.params.iter() {
        let ad = grads.get(bound.var(name));
        let n = tensor.numel();
        let stride = (n / coords_per_param).max(1);
        let mut max_rel = 0.0f64;
        let mut checked = 0;
        for idx in (0..n).step_by(stride).take(coords_per_param) {
            let fd = {
                let mut perturbed = model.params.clone();
                perturbed.get_mut(name).data_mut()[idx] += h;
                let plus = eval_loss(
                    &Model {
                        cfg: model.cfg.clone(),
                        params: perturbed.clone(),
                    },
                    build,
                );
                perturbed.get_mut(name).data_mut()[idx] -= 2.0 * h;
                let minus = eval_loss(
                    &Model {
                        cfg: model.cfg.clone(),
                        params: perturbed,
                    },
                    build,
                );
                (plus - minus) / (2.0 * h)
            };
            let a = ad.map_or(0.0, |g| g[idx]);
            let denom = a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((a - fd).abs() / denom);
            checked += 1;
        }
        reports.push(GradReport {
            name: name.to_string(),
            coords_checked: checked,
            max_rel_err: max_rel,
        });
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ForwardOpts, ModelConfig, Variant};
    use crate::rng::stream;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn tiny(variant: Variant, distill: bool, registers: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            heads: 2,
            blocks: 1,
            steps: 3,
            patch: 4,
            image: 8,
            channels: 3,
            classes: 4,
            ffn_ratio: 2,
            variant,
            registers,
            distill,
            eps: 1e-6,
        }
    }

    fn loss_builder(
        cfg: &ModelConfig,
        seed: u64,
    ) -> impl Fn(&Model<f64>, &mut Tape<f64>, &Bound) -> Var {
        let mut r = stream(seed, "gradcheck-data");
        let images = Tensor::from_fn(&[2, cfg.channels, cfg.image, cfg.image], |_| {
            r.gen_range(-1.0..1.0)
        });
        let mut q = vec![0.0; 2 * cfg.classes];
        q[1] = 1.0;
        q[cfg.classes + 2] = 1.0;
        let q = Tensor::new(&[2, cfg.classes], q);
        let distill = cfg.distill;
        move |m: &Model<f64>, tape: &mut Tape<f64>, bound: &Bound| {
            let img = tape.constant(images.clone());
            let out = m
                .forward(tape, img, bound, ForwardOpts::default(), None)
                .expect("finite");
            let logits = m.classify(tape, out.tokens, bound);
            let mut loss = tape.ce_with_q(logits, q.clone());
            if distill {
                // Pull the distillation head into the graph as well.
                let dl = m.classify_distill(tape, out.tokens, bound);
                let sq = tape.hadamard(dl, dl);
                let extra = tape.mean(sq);
                let extra = tape.scale(extra, 0.5);
                loss = tape.add(loss, extra);
            }
            loss
        }
    }

    fn assert_all_pass(cfg: ModelConfig, seed: u64) {
        let model = Model::<f64>::init(cfg.clone(), seed).unwrap();
        let build = loss_builder(&cfg, seed);
        let reports = check_grads(&model, &build, 3, 1e-5);
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(
                r.max_rel_err <= 1e-4,
                "{}: rel err {} over {} coords",
                r.name,
                r.max_rel_err,
                r.coords_checked
            );
        }
    }

    #[test]
    fn base_model_grads_match_finite_differences() {
        assert_all_pass(tiny(Variant::Base, false, 0), 41);
    }

    #[test]
    fn te_distill_register_grads_match() {
        assert_all_pass(tiny(Variant::Te, true, 2), 42);
    }

    #[test]
    fn fl_untied_grads_match() {
        assert_all_pass(tiny(Variant::Fl { n: 2, tied: false }, false, 0), 43);
    }

    #[test]
    fn sc_untied_grads_match() {
        let mut cfg = tiny(Variant::Sc { n: 2, tied: false }, false, 0);
        cfg.steps = 4;
        assert_all_pass(cfg, 44);
    }
}
