//! Single-threaded training loop: AdamW with decoupled weight decay, linear
//! warmup to a constant peak rate, seeded shuffling, and per-sample gradient
//! accumulation into fixed-size batches. Deterministic given (config, seed).

use mnemcap_core::mask::MaskedInstance;
use mnemcap_core::rng::SplitMix64;
use mnemcap_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::net::{ContextInput, Model, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent warming the rate up linearly.
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.05,
            batch_size: 16,
            epochs: 3,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument("negative learning rate".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidArgument("warmup fraction must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at 1-indexed `step` of `total_steps`: linear warmup over the
/// first `warmup_fraction` of steps, constant peak afterwards.
pub fn lr_at(config: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let warmup = ((config.warmup_fraction * total_steps as f64).floor() as usize).max(1);
    if step >= warmup {
        config.learning_rate
    } else {
        config.learning_rate * step as f64 / warmup as f64
    }
}

/// One training datum: a (possibly corrupted) caption plus its context.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub masked: MaskedInstance,
    pub image: Option<Vec<f32>>,
    pub description_ids: Vec<u32>,
    pub section_ids: Vec<u32>,
}

impl TrainItem {
    pub fn context(&self) -> ContextInput<'_> {
        ContextInput {
            image: self.image.as_deref(),
            description_ids: &self.description_ids,
            section_ids: &self.section_ids,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossCurve {
    /// Mean token loss per optimizer step.
    pub per_step: Vec<f64>,
    /// Mean of the step losses within each epoch.
    pub per_epoch: Vec<f64>,
}

struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    fn new<S: Scalar>(params: &ModelParams<S>) -> Self {
        let mut m = Vec::new();
        params.for_each_tensor(|_, tensor| m.push(vec![0.0; tensor.len()]));
        let v = m.clone();
        AdamW { m, v, t: 0 }
    }

    fn step<S: Scalar>(
        &mut self,
        params: &mut ModelParams<S>,
        grads: &ModelParams<S>,
        lr: f64,
        config: &TrainConfig,
    ) {
        self.t += 1;
        let t = self.t as f64;
        let bias1 = 1.0 - config.beta1.powf(t);
        let bias2 = 1.0 - config.beta2.powf(t);
        let mut grad_tensors: Vec<&Mat<S>> = Vec::with_capacity(self.m.len());
        grads.for_each_tensor(|_, tensor| grad_tensors.push(tensor));
        let mut idx = 0;
        params.for_each_tensor_mut(|_, tensor| {
            let g = grad_tensors[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((p, &gv), (mi, vi)) in
                tensor.data.iter_mut().zip(&g.data).zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gf = gv.to_f64();
                *mi = config.beta1 * *mi + (1.0 - config.beta1) * gf;
                *vi = config.beta2 * *vi + (1.0 - config.beta2) * gf * gf;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                let update = m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * p.to_f64();
                *p = S::from_f64(p.to_f64() - lr * update);
            }
            idx += 1;
        });
    }
}

/// Diagnostic callback invoked if the loss stops being finite; receives the
/// parameters as they were at the failing step.
pub type DiagnosticSink<'a, S> = Option<&'a mut dyn FnMut(&ModelParams<S>)>;

/// Run the update loop over `items`. Shuffling, dropout, and all updates are
/// driven by `train_config.seed`; identical inputs give bit-identical
/// parameters.
pub fn train<S: Scalar>(
    model: &Model<S>,
    params: &mut ModelParams<S>,
    train_config: &TrainConfig,
    items: &[TrainItem],
    mut diagnostic: DiagnosticSink<'_, S>,
) -> Result<LossCurve> {
    train_config.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("no training items".into()));
    }
    let mut rng = SplitMix64::new(train_config.seed);
    let steps_per_epoch = items.len().div_ceil(train_config.batch_size);
    let total_steps = steps_per_epoch * train_config.epochs;
    let mut optimizer = AdamW::new(params);
    let mut grads = params.zeros_like();
    let mut curve = LossCurve::default();
    let mut step = 0usize;
    let use_dropout = model.config.dropout > 0.0;

    for _epoch in 0..train_config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(train_config.batch_size) {
            step += 1;
            grads.for_each_tensor_mut(|_, t| t.fill_zero());
            let mut batch_loss = 0.0;
            for &i in batch {
                let item = &items[i];
                let loss = model.loss_masked_backward(
                    params,
                    &item.masked,
                    &item.context(),
                    &mut grads,
                    use_dropout.then_some(&mut rng),
                )?;
                batch_loss += loss;
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                if let Some(sink) = diagnostic.as_mut() {
                    sink(params);
                }
                return Err(Error::Validation(format!(
                    "non-finite loss {batch_loss} at step {step}"
                )));
            }
            grads.scale(1.0 / batch.len() as f64);
            let lr = lr_at(train_config, step, total_steps);
            optimizer.step(params, &grads, lr, train_config);
            curve.per_step.push(batch_loss);
            epoch_sum += batch_loss;
            epoch_steps += 1;
        }
        curve.per_epoch.push(epoch_sum / epoch_steps.max(1) as f64);
    }
    Ok(curve)
}
