//! Finite-difference verification of the analytic gradients, in double
//! precision: every parameter tensor is probed at seeded coordinates with
//! central differences and compared against the backward pass.

use mnemcap_core::mask::MaskedInstance;
use mnemcap_core::rng::SplitMix64;
use mnemcap_core::tokenize::SENT_BASE;
use mnemcap_core::Result;
use serde::Serialize;

use crate::layers::{linear_backward, linear_forward, LinearParams};
use crate::net::{Arch, BlockKind, ContextInput, Model, ModelConfig};
use crate::tensor::Mat;

const FD_STEP: f64 = 1e-5;
const COORDS_PER_TENSOR: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub arch: Arch,
    pub block: BlockKind,
    /// worst relative error per tensor
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

/// Central differences at step 1e-5 on an O(1) loss carry ~1e-10 of absolute
/// roundoff noise, so comparisons are floored at a denominator of 1e-5: a
/// coordinate with a smaller true gradient passes iff the absolute
/// discrepancy stays below 1e-5 × tolerance, far above the noise but far
/// below any real gradient bug.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

fn tiny_config(arch: Arch, block: BlockKind) -> ModelConfig {
    ModelConfig {
        arch,
        block,
        d_model: 12,
        n_layers: 2,
        n_heads: 2,
        conv_kernel: 3,
        d_img: 6,
        vocab_size: 368,
        max_len: 24,
        dropout: 0.0,
    }
}

fn probe_instance(arch: Arch) -> MaskedInstance {
    match arch {
        Arch::DecoderPrefix => MaskedInstance {
            // caption of 6 tokens with tokens 2..4 masked in place
            input_ids: vec![40, 41, 260, 260, 44, 45],
            target_ids: vec![40, 41, 42, 43, 44, 45],
            masked_spans: vec![(2, 4)],
            strategy: "mnem-decoder".into(),
            seed: 0,
        },
        Arch::EncoderDecoder => MaskedInstance {
            // one span collapsed to SENT_0; target is sentinel-delimited
            input_ids: vec![40, 41, SENT_BASE, 44, 45],
            target_ids: vec![SENT_BASE, 42, 43, SENT_BASE + 1],
            masked_spans: vec![(2, 4)],
            strategy: "mnem-sentinel".into(),
            seed: 0,
        },
    }
}

/// Compare every parameter tensor's analytic gradient with central finite
/// differences of the masked-training loss at `COORDS_PER_TENSOR` seeded
/// coordinates.
pub fn grad_check(arch: Arch, block: BlockKind, seed: u64) -> Result<GradCheckReport> {
    let model = Model::<f64>::new(tiny_config(arch, block))?;
    let mut params = model.init_params(seed);
    // Probe at a larger weight scale than the training init: near-uniform
    // attention at std 0.02 leaves q/k gradients at the finite-difference
    // noise floor, which tests nothing. Layer-norm gains stay at 1.
    let mut scale_rng = SplitMix64::new(seed ^ 0x5EED);
    params.for_each_tensor_mut(|name, t| {
        if !name.ends_with(".gain") {
            t.data.iter_mut().for_each(|v| *v = scale_rng.normal() * 0.3);
        }
    });
    let masked = probe_instance(arch);
    let image: Vec<f32> = {
        let mut rng = SplitMix64::new(seed ^ 0xABCD);
        (0..model.config.d_img).map(|_| rng.normal() as f32 * 0.5).collect()
    };
    let desc = vec![10u32, 11, 12];
    let sec = vec![20u32, 21];
    let ctx = ContextInput { image: Some(&image), description_ids: &desc, section_ids: &sec };

    let mut grads = params.zeros_like();
    model.loss_masked_backward(&params, &masked, &ctx, &mut grads, None)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    grads.for_each_tensor(|name, t| analytic.push((name.to_string(), t.data.clone())));

    let mut coord_rng = SplitMix64::new(seed.wrapping_add(99));
    let mut plan: Vec<(String, Vec<usize>)> = Vec::new();
    params.for_each_tensor(|name, t| {
        let coords: Vec<usize> =
            (0..COORDS_PER_TENSOR.min(t.len())).map(|_| coord_rng.below(t.len())).collect();
        plan.push((name.to_string(), coords));
    });

    let mut per_tensor = Vec::with_capacity(plan.len());
    let mut max_rel_err = 0.0f64;
    for (tensor_idx, (name, coords)) in plan.iter().enumerate() {
        let mut worst = 0.0f64;
        for &coord in coords {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut visit_idx = 0;
                params.for_each_tensor_mut(|_, t| {
                    if visit_idx == tensor_idx {
                        t.data[coord] += delta;
                    }
                    visit_idx += 1;
                });
                let loss = model.loss_masked(&params, &masked, &ctx);
                let mut visit_idx = 0;
                params.for_each_tensor_mut(|_, t| {
                    if visit_idx == tensor_idx {
                        t.data[coord] -= delta;
                    }
                    visit_idx += 1;
                });
                loss
            };
            let up = eval(FD_STEP)?;
            let down = eval(-FD_STEP)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_err(analytic[tensor_idx].1[coord], numeric);
            worst = worst.max(err);
        }
        max_rel_err = max_rel_err.max(worst);
        per_tensor.push((name.clone(), worst));
    }
    Ok(GradCheckReport { arch, block, per_tensor, max_rel_err })
}

/// Gradient check of an isolated linear map under a quadratic loss; central
/// differences are exact here up to floating-point roundoff.
pub fn grad_check_linear(seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let (out_dim, in_dim, rows) = (3, 5, 4);
    let mut p = LinearParams::<f64>::zeros(out_dim, in_dim);
    p.w.data.iter_mut().for_each(|v| *v = rng.normal() * 0.3);
    p.b.data.iter_mut().for_each(|v| *v = rng.normal() * 0.1);
    let mut x = Mat::zeros(rows, in_dim);
    x.data.iter_mut().for_each(|v| *v = rng.normal());

    // loss = 0.5 * sum(y^2) → dy = y
    let y = linear_forward(&p, &x);
    let mut grads = LinearParams::zeros(out_dim, in_dim);
    linear_backward(&p, &x, &y, &mut grads);

    let mut worst = 0.0f64;
    let loss_of = |p: &LinearParams<f64>| -> f64 {
        linear_forward(p, &x).data.iter().map(|v| 0.5 * v * v).sum()
    };
    for idx in 0..p.w.data.len() {
        let orig = p.w.data[idx];
        p.w.data[idx] = orig + FD_STEP;
        let up = loss_of(&p);
        p.w.data[idx] = orig - FD_STEP;
        let down = loss_of(&p);
        p.w.data[idx] = orig;
        worst = worst.max(rel_err(grads.w.data[idx], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_micro_model_is_exact() {
        assert!(grad_check_linear(7) < 1e-8);
    }

    #[test]
    fn decoder_prefix_dynamic_conv_gradients() {
        let report = grad_check(Arch::DecoderPrefix, BlockKind::DynamicConv, 3).unwrap();
        assert!(report.max_rel_err < 1e-3, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn decoder_prefix_self_attn_gradients() {
        let report = grad_check(Arch::DecoderPrefix, BlockKind::SelfAttn, 4).unwrap();
        assert!(report.max_rel_err < 1e-3, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn encoder_decoder_gradients() {
        for block in [BlockKind::SelfAttn, BlockKind::DynamicConv] {
            let report = grad_check(Arch::EncoderDecoder, block, 5).unwrap();
            assert!(report.max_rel_err < 1e-3, "max rel err {}", report.max_rel_err);
        }
    }
}
