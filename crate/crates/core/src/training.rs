//! Adam with coupled L2 weight decay, the epoch loop, and pretrain/finetune.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Mode};
use crate::dataset::{batch_tensors, Window};
use crate::error::{param_err, Error, Result};
use crate::metrics::SquaredError;
use crate::models::{build_model, ArchKind, Model};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(deny_unknown_fields)
)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Epoch interval for the checkpoint hook; 0 disables it.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Defaults with the learning rate for `kind`.
    pub fn for_arch(kind: ArchKind) -> Self {
        let lr = match kind {
            ArchKind::Mlp => 2e-3,
            ArchKind::Lstm | ArchKind::CnnLstm => 1e-3,
            ArchKind::Transformer => 5e-4,
        };
        Self {
            lr,
            epochs: 200,
            batch_size: 32,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(param_err!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(param_err!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 {
            return Err(param_err!("batch size must be at least 1"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(param_err!(
                "eps must be positive and weight decay non-negative"
            ));
        }
        Ok(())
    }
}

/// First and second moments per parameter tensor, and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<_> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_model(model: &Model<T>) -> Self {
        Self::new(model.params().tensors())
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Contract(format!(
                "parameter {i} has shape {:?} but gradient {:?} and moment {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - libm::pow(cfg.beta1, t);
    let c2 = 1.0 - libm::pow(cfg.beta2, t);
    let f = T::from_f64_lossy;
    let (b1, b2, wd, eps) = (f(cfg.beta1), f(cfg.beta2), f(cfg.weight_decay), f(cfg.eps));
    let (one_b1, one_b2) = (f(1.0 - cfg.beta1), f(1.0 - cfg.beta2));
    let step = f(cfg.lr / c1);
    let inv_c2 = f(1.0 / c2);
    for ((p, g), (m, v)) in params
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((w, &grad), (m, v)) in it {
            let g = grad + wd * *w;
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *w -= step * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Source of wall-clock readings in seconds.
pub trait Clock {
    fn now(&self) -> f64;
}

/// A clock that never advances.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch MSE losses.
    pub train_loss: f64,
    /// `None` when there are no evaluation windows.
    pub eval_rmse_x100: Option<f64>,
    pub seconds: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Receives each finished epoch.
pub trait EpochHook {
    /// Called after every epoch; `checkpoint` is set on epochs that are a
    /// multiple of `checkpoint_every`.
    fn epoch_end(
        &mut self,
        model: &Model<f32>,
        state: &AdamState<f32>,
        record: &EpochRecord,
        checkpoint: bool,
    ) -> Result<()>;
}

impl EpochHook for () {
    fn epoch_end(
        &mut self,
        _: &Model<f32>,
        _: &AdamState<f32>,
        _: &EpochRecord,
        _: bool,
    ) -> Result<()> {
        Ok(())
    }
}

/// Forecasts for `windows` in eval mode, `batch` at a time, as `[N, t_out, 17, 2]`.
pub fn predict(model: &mut Model<f32>, windows: &[Window], batch: usize) -> Result<Tensor<f32>> {
    let mode = model.mode();
    model.set_mode(Mode::Eval);
    let out = (|| {
        let mut data = Vec::new();
        for chunk in windows.chunks(batch.max(1)) {
            let refs: Vec<&Window> = chunk.iter().collect();
            let (x, _) = batch_tensors::<f32>(&refs)?;
            data.extend_from_slice(model.forward(&x)?.data());
        }
        Tensor::new(&model.hyper().output_shape(windows.len()), data)
    })();
    model.set_mode(mode);
    out
}

/// RMSE×100 of eval-mode forecasts against the window targets.
pub fn evaluate_rmse(model: &mut Model<f32>, windows: &[Window], batch: usize) -> Result<f64> {
    let mut acc = SquaredError::default();
    let mode = model.mode();
    model.set_mode(Mode::Eval);
    let out = (|| {
        for chunk in windows.chunks(batch.max(1)) {
            let refs: Vec<&Window> = chunk.iter().collect();
            let (x, y) = batch_tensors::<f32>(&refs)?;
            acc.add(model.forward(&x)?.data(), y.data())?;
        }
        acc.rmse_x100()
    })();
    model.set_mode(mode);
    out
}

fn diverged(epoch: usize, step: u64, loss: f64) -> Error {
    Error::Diverged {
        epoch,
        step: step as usize,
        loss,
    }
}

/// Train with a fresh optimizer, no clock and no hook.
pub fn train(
    model: &mut Model<f32>,
    train: &[Window],
    eval: &[Window],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let mut state = AdamState::for_model(model);
    train_with(model, train, eval, cfg, &mut state, &NoClock, &mut ())
}

/// The epoch loop: seeded shuffle, minibatches (last partial batch kept),
/// MSE, backward, Adam. Dropout streams are keyed by the optimizer's step
/// counter. The model is left in eval mode.
pub fn train_with(
    model: &mut Model<f32>,
    train: &[Window],
    eval: &[Window],
    cfg: &TrainConfig,
    state: &mut AdamState<f32>,
    clock: &dyn Clock,
    hook: &mut dyn EpochHook,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(param_err!("training set is empty"));
    }
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = clock.now();
        model.set_mode(Mode::Train);
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, Domain::Shuffle, epoch as u64));
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let step = state.t;
            let batch: Vec<&Window> = idx.iter().map(|&i| &train[i]).collect();
            let (x, y) = batch_tensors::<f32>(&batch)?;
            let loss = train_step(model, x, y, cfg, state).map_err(|e| match e {
                Error::Numeric(_) => diverged(epoch, step, f64::NAN),
                e => e,
            })?;
            if !loss.is_finite() {
                return Err(diverged(epoch, step, loss));
            }
            loss_sum += loss * batch.len() as f64;
        }
        model.set_mode(Mode::Eval);
        let eval_rmse_x100 = if eval.is_empty() {
            None
        } else {
            Some(evaluate_rmse(model, eval, cfg.batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            eval_rmse_x100,
            seconds: clock.now() - start,
            steps: state.t,
        };
        history.epochs.push(record);
        let checkpoint = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
        hook.epoch_end(model, state, &record, checkpoint)?;
    }
    model.set_mode(Mode::Eval);
    Ok(history)
}

/// Forward, MSE, backward and one Adam update on a single batch; returns
/// the batch loss computed before the update.
pub fn train_step(
    model: &mut Model<f32>,
    x: Tensor<f32>,
    y: Tensor<f32>,
    cfg: &TrainConfig,
    state: &mut AdamState<f32>,
) -> Result<f64> {
    let mut g = Graph::new(Mode::Train).with_dropout_stream(cfg.seed, state.t);
    let xv = g.constant(x);
    let (pred, vars) = model.forward_graph(&mut g, xv, true)?;
    let target = g.constant(y);
    let loss_var = g.mse_loss(pred, target)?;
    let loss = g.value(loss_var).data()[0].to_f64_lossy();
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = g.backward(loss_var)?;
    drop(g);
    model.zero_grads();
    model.accumulate_grads(&grads, &vars)?;
    let (params, grads) = model.params_and_grads_mut();
    adam_step(params.tensors_mut(), grads, state, cfg)?;
    Ok(loss)
}

/// Output of [`pretrain_finetune`].
#[derive(Debug, Clone)]
pub struct TransferRun {
    pub model: Model<f32>,
    pub pretrain: TrainHistory,
    pub finetune: TrainHistory,
}

/// Build `kind` from `cfg_pre.seed`, train on the synthetic windows, then
/// continue on the real windows with a fresh optimizer.
pub fn pretrain_finetune(
    kind: ArchKind,
    synthetic: &[Window],
    real_train: &[Window],
    real_eval: &[Window],
    cfg_pre: &TrainConfig,
    cfg_fine: &TrainConfig,
) -> Result<TransferRun> {
    let mut model = build_model(kind, cfg_pre.seed)?;
    let pretrain = train(&mut model, synthetic, &[], cfg_pre)?;
    let finetune = train(&mut model, real_train, real_eval, cfg_fine)?;
    Ok(TransferRun {
        model,
        pretrain,
        finetune,
    })
}
