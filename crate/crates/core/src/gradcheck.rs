//! Finite-difference verification of tape gradients for whole models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{relative_error, GradTape, GRAD_ABS_FLOOR};
use crate::backbone::PvtModel;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{Initializer, Module};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Input side length for the micro model check.
pub const MICRO_SIZE: usize = 16;
/// Weight scale for checks; large enough that attention is far from uniform.
pub const CHECK_INIT_STD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub tensors: usize,
    pub elements: usize,
    /// Elements where both gradients were below [`GRAD_ABS_FLOOR`].
    pub below_floor: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Loss `Σ logits ⊙ r` for a fixed random `r`, so every logit carries a
/// distinct, nonzero weight.
fn loss(model: &PvtModel<f64>, image: &Tensor<f64>, r: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(model.classify(image)?.mul(r)?.sum())
}

/// Compares the tape gradient of every parameter element, and of the input
/// image, with central differences.
pub fn check_model(cfg: &ModelConfig, h: usize, w: usize, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut model = PvtModel::<f64>::with_initializer(cfg, &mut Initializer::with_std(seed, CHECK_INIT_STD))?;
    let image = Tensor::<f64>::rand_uniform(&[1, cfg.in_channels, h, w], seed.wrapping_add(1), -1.0, 1.0)?;
    let r = Tensor::<f64>::rand_normal(
        &[1, cfg.num_classes],
        &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)),
        0.0,
        1.0,
    )?;

    let tape = GradTape::<f64>::new();
    let mut tracked = model.clone();
    let mut handles: Vec<(String, Tensor<f64>)> = Vec::new();
    tracked.visit_mut(&mut |name, t| {
        *t = tape.watch(t);
        handles.push((name.to_string(), t.clone()));
    });
    let image_handle = tape.watch(&image);
    let grads = tape.backward(&loss(&tracked, &image_handle, &r)?)?;
    drop(tracked);

    let mut report = GradCheckReport {
        seed,
        tolerance: tol,
        tensors: handles.len() + 1,
        elements: 0,
        below_floor: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        failures: Vec::new(),
    };
    let mut compare = |name: &str, i: usize, analytic: f64, numeric: f64| {
        let err = relative_error(analytic, numeric);
        report.elements += 1;
        if analytic.abs().max(numeric.abs()) < GRAD_ABS_FLOOR {
            report.below_floor += 1;
        }
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = format!("{name}[{i}]");
        }
        if err.is_nan() || err >= tol {
            report.failures.push(format!(
                "{name}[{i}]: tape {analytic:.9e}, finite difference {numeric:.9e}, rel err {err:.3e}"
            ));
        }
    };

    for (name, handle) in &handles {
        let analytic = grads.get_or_zero(handle);
        let base = handle.detach();
        for i in 0..base.len() {
            let v = base.data()[i];
            let mut eval = |value: f64| -> Result<f64> {
                model.visit_mut(&mut |n, t| {
                    if n == name {
                        *t = base.with_element(i, value);
                    }
                });
                loss(&model, &image, &r)?.item()
            };
            let numeric = (eval(v + eps)? - eval(v - eps)?) / (2.0 * eps);
            eval(v)?;
            compare(name, i, analytic.data()[i], numeric);
        }
    }

    let analytic = grads.get_or_zero(&image_handle);
    for i in 0..image.len() {
        let v = image.data()[i];
        let plus = loss(&model, &image.with_element(i, v + eps), &r)?.item()?;
        let minus = loss(&model, &image.with_element(i, v - eps), &r)?.item()?;
        compare("input", i, analytic.data()[i], (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}

/// The standard check: micro model, 16×16 input, 64-bit.
pub fn check_micro(seed: u64, tol: f64) -> Result<GradCheckReport> {
    check_model(&ModelConfig::micro(), MICRO_SIZE, MICRO_SIZE, seed, DEFAULT_EPS, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Ablation, AttentionKind};

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::micro();
        cfg.stages.truncate(1);
        cfg.stages[0].attn = AttentionKind::Sra { reduction_ratio: 2 };
        cfg
    }

    #[test]
    fn one_stage_passes() {
        let r = check_model(&tiny(), 8, 8, 3, DEFAULT_EPS, DEFAULT_TOL).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
        assert!(r.elements > 0);
    }

    #[test]
    fn one_stage_linear_passes() {
        let cfg = tiny().with_ablation(
            Ablation {
                overlapping_patch_embed: true,
                conv_ffn: true,
                linear_sra: true,
            },
            2,
        );
        let r = check_model(&cfg, 8, 8, 4, DEFAULT_EPS, DEFAULT_TOL).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
    }
}
