//! The training loop: relative-L2 loss, per-epoch seeded shuffling,
//! batched gradient accumulation, clipping, AdamW with the one-cycle
//! schedule, and per-epoch test evaluation.
//!
//! Epoch shuffles draw from a seed derived per epoch, so a run resumed
//! from epoch k replays epochs k.. exactly as the uninterrupted run.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    gradients_in_order, init_params, model_forward, model_forward_tape, register_params,
    ModelConfig, ModelParams,
};
use crate::optim::{adamw_tensor, clip_grad_norm, onecycle_lr, AdamState, AdamWConfig};
use crate::parallel::map_indexed;
use crate::tensor::{Scalar, Tensor};

/// Numeric width training runs in. Checkpoints always store f32 payloads,
/// so single precision round-trips bitwise through save/load.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    1
}
fn default_lr_max() -> f64 {
    1e-3
}
fn default_warmup_frac() -> f64 {
    0.1
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_clip")]
    pub clip_max_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr_max: default_lr_max(),
            warmup_frac: default_warmup_frac(),
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            clip_max_norm: default_clip(),
            seed: 0,
            precision: Precision::Single,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr_max > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_max {} must be positive",
                self.lr_max
            )));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "warmup_frac {} must lie in (0, 1)",
                self.warmup_frac
            )));
        }
        if !(self.clip_max_norm > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "clip_max_norm {} must be positive",
                self.clip_max_norm
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!(
                    "{} = {} must lie in [0, 1)",
                    name, b
                )));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig(
                "weight_decay must be >= 0 and adam_eps > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// ‖pred − target‖₂ / ‖target‖₂ over flattened entries, in f64.
pub fn relative_l2<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "relative_l2",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let mut diff_sq = 0.0f64;
    let mut target_sq = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p.to_f64() - t.to_f64();
        diff_sq += d * d;
        let tv = t.to_f64();
        target_sq += tv * tv;
    }
    if target_sq == 0.0 {
        return Err(Error::invalid_value("relative_l2", "zero-norm target"));
    }
    Ok((diff_sq / target_sq).sqrt())
}

/// One row of the run log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate applied at the last optimizer step of the epoch.
    pub lr: f64,
    /// Mean per-sample training loss across the epoch.
    pub train_rel_l2: f64,
    /// Mean per-sample relative L2 on the test split after the epoch.
    pub test_rel_l2: f64,
    pub seconds: f64,
}

/// Everything that evolves during training; checkpointable as one unit.
#[derive(Clone)]
pub struct TrainState<T: Scalar> {
    pub params: ModelParams<T>,
    pub opt: AdamState<T>,
    pub epochs_done: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let params: ModelParams<T> = init_params(cfg, cfg.seed)?;
        let refs: Vec<&Tensor<T>> = params.named().into_iter().map(|(_, t)| t).collect();
        let opt = AdamState::new(&refs);
        Ok(Self {
            params,
            opt,
            epochs_done: 0,
        })
    }
}

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn cast_pairs<T: Scalar>(set: &Dataset) -> Vec<(Tensor<T>, Tensor<T>)> {
    set.samples
        .iter()
        .map(|s| (s.features.cast::<T>(), s.labels.cast::<T>()))
        .collect()
}

fn sample_loss_and_grads<T: Scalar>(
    model_cfg: &ModelConfig,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let (vars, flat) = register_params(&mut tape, params);
    let input = tape.constant(x.clone());
    let pred = model_forward_tape(&mut tape, input, model_cfg, &vars)?;
    let loss = tape.relative_l2(pred, y)?;
    let loss_value = tape.value(loss).data()[0].to_f64();
    let grads = tape.backward(loss)?;
    Ok((loss_value, gradients_in_order(&grads, &flat, params)))
}

fn check_dims(model_cfg: &ModelConfig, set: &Dataset, role: &str) -> Result<()> {
    let (_, d_in, d_out) = set.uniform_dims()?;
    if d_in != model_cfg.d_in || d_out != model_cfg.d_out {
        return Err(Error::InvalidConfig(format!(
            "{} split has d_in={} d_out={}, model expects {}/{}",
            role, d_in, d_out, model_cfg.d_in, model_cfg.d_out
        )));
    }
    Ok(())
}

/// Runs epochs `state.epochs_done .. min(cfg.epochs, stop_at_epoch)`,
/// updating `state` in place and returning one metrics row per epoch run.
/// The schedule always spans the full `cfg.epochs` horizon, so stopping
/// early and resuming reproduces the uninterrupted trajectory.
pub fn fit<T: Scalar>(
    state: &mut TrainState<T>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    stop_at_epoch: Option<usize>,
) -> Result<Vec<EpochMetrics>> {
    model_cfg.validate()?;
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::InvalidConfig("empty train or test split".into()));
    }
    check_dims(model_cfg, train_set, "train")?;
    check_dims(model_cfg, test_set, "test")?;

    let train_pairs = cast_pairs::<T>(train_set);
    let test_pairs = cast_pairs::<T>(test_set);
    let n = train_pairs.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let adamw_cfg = cfg.adamw();
    let end = stop_at_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);

    let mut metrics = Vec::new();
    while state.epochs_done < end {
        let epoch = state.epochs_done;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_shuffle_seed(cfg.seed, epoch));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut last_lr = 0.0f64;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Independent tapes per sample; reduction stays in sample order
            // so results do not depend on the worker count.
            let results = map_indexed(chunk.len(), |i| {
                let (x, y) = &train_pairs[chunk[i]];
                sample_loss_and_grads(model_cfg, &state.params, x, y)
            });
            let mut batch_loss = 0.0f64;
            let mut grads: Option<Vec<Tensor<T>>> = None;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch as u32,
                    batch: batch_idx,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss * chunk.len() as f64;
            let inv = T::from_f64(1.0 / chunk.len() as f64);
            for g in grads.iter_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            clip_grad_norm(&mut grads, cfg.clip_max_norm)?;

            let global_step = epoch * steps_per_epoch + batch_idx;
            let lr = onecycle_lr(global_step, total_steps, cfg.lr_max, cfg.warmup_frac);
            last_lr = lr;
            state.opt.step += 1;
            let step = state.opt.step;
            let TrainState { params, opt, .. } = state;
            let mut idx = 0usize;
            let mut update_err: Option<Error> = None;
            params.for_each_mut(&mut |_, p| {
                if update_err.is_none() {
                    if let Err(e) =
                        adamw_tensor(p, &grads[idx], &mut opt.m[idx], &mut opt.v[idx], step, lr, &adamw_cfg)
                    {
                        update_err = Some(e);
                    }
                }
                idx += 1;
            });
            if let Some(e) = update_err {
                return Err(e);
            }
        }

        let mut test_sum = 0.0f64;
        for (x, y) in &test_pairs {
            let pred = model_forward(x, model_cfg, &state.params)?;
            test_sum += relative_l2(&pred, y)?;
        }
        metrics.push(EpochMetrics {
            epoch,
            lr: last_lr,
            train_rel_l2: loss_sum / n as f64,
            test_rel_l2: test_sum / test_pairs.len() as f64,
            seconds: started.elapsed().as_secs_f64(),
        });
        state.epochs_done += 1;
    }
    Ok(metrics)
}

/// Mean and per-sample relative L2 of an arbitrary predictor over
/// (features, labels) pairs.
pub fn evaluate<T: Scalar, F>(
    predict: F,
    pairs: &[(Tensor<T>, Tensor<T>)],
) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("nothing to evaluate".into()));
    }
    let mut per_sample = Vec::with_capacity(pairs.len());
    for (x, y) in pairs {
        let pred = predict(x)?;
        per_sample.push(relative_l2(&pred, y)?);
    }
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok((mean, per_sample))
}

/// [`evaluate`] with the model as predictor, on a dataset in any precision.
pub fn evaluate_model<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    set: &Dataset,
) -> Result<(f64, Vec<f64>)> {
    check_dims(cfg, set, "eval")?;
    let pairs = cast_pairs::<T>(set);
    evaluate(|x| model_forward(x, cfg, params), &pairs)
}
