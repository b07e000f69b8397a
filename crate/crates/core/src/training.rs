//! Minibatch SGD with momentum, early stopping and the four training
//! criteria (plain likelihood, dropout, fixed mask, dropout boosting).

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::misclassification_rate;
use crate::data::Dataset;
use crate::error::{invalid, shape, Error, Result};
use crate::masks::{sample_sizes, DropoutMask, MaskPolicy};
use crate::model::{
    class_grad_to_output, log_distribution, output_distribution, squash, ModelParams,
    NormConstraintSet, ParamGrads,
};

/// Default early-stopping window in epochs.
pub const DEFAULT_PATIENCE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr0: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub lr_decay: f64,
    pub momentum0: f64,
    pub momentum_final: f64,
    /// Epoch at which momentum reaches `momentum_final`.
    pub momentum_saturation_epoch: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    /// Initial weights are uniform on `[-init_range, init_range]`.
    pub init_range: f64,
    pub hidden_sizes: Vec<usize>,
    /// Caps on incoming weight norms: either one value for every weight
    /// layer or one per weight layer (hidden layers, then output).
    pub max_norms: Option<Vec<f64>>,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(invalid(what.to_string())) };
        check(self.lr0 > 0.0 && self.lr0.is_finite(), "lr0 must be positive")?;
        check(self.lr_decay > 0.0 && self.lr_decay <= 1.0, "lr_decay must lie in (0, 1]")?;
        check((0.0..1.0).contains(&self.momentum0), "momentum0 must lie in [0, 1)")?;
        check(
            self.momentum_final >= self.momentum0 && self.momentum_final < 1.0,
            "momentum_final must lie in [momentum0, 1)",
        )?;
        check(self.batch_size > 0, "batch_size must be positive")?;
        check(self.max_epochs > 0, "max_epochs must be positive")?;
        check(self.patience_epochs > 0, "patience_epochs must be positive")?;
        check(
            self.patience_epochs <= self.max_epochs,
            "patience_epochs may not exceed max_epochs",
        )?;
        check(
            self.init_range > 0.0 && self.init_range.is_finite(),
            "init_range must be positive",
        )?;
        check(
            self.hidden_sizes.iter().all(|&h| h > 0),
            "hidden sizes must be positive",
        )?;
        if let Some(norms) = &self.max_norms {
            let n_layers = self.hidden_sizes.len() + 1;
            check(
                norms.len() == 1 || norms.len() == n_layers,
                "max_norms needs one value or one per weight layer",
            )?;
            check(
                norms.iter().all(|&c| c > 0.0),
                "max_norms entries must be positive",
            )?;
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    /// Linear ramp from `momentum0` to `momentum_final`, then constant.
    pub fn momentum_at(&self, epoch: usize) -> f64 {
        if epoch >= self.momentum_saturation_epoch {
            return self.momentum_final;
        }
        let t = epoch as f64 / self.momentum_saturation_epoch as f64;
        self.momentum0 + t * (self.momentum_final - self.momentum0)
    }

    pub fn norm_constraints(&self) -> Result<NormConstraintSet> {
        let n_layers = self.hidden_sizes.len() + 1;
        match &self.max_norms {
            None => Ok(NormConstraintSet::unconstrained(n_layers)),
            Some(v) if v.len() == 1 => NormConstraintSet::new(vec![Some(v[0]); n_layers]),
            Some(v) => NormConstraintSet::new(v.iter().map(|&c| Some(c)).collect()),
        }
    }
}

/// Momentum buffers plus the schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ParamGrads,
    pub epoch: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, hyper: &Hyperparams) -> Self {
        Self {
            velocity: ParamGrads::zeros_like(params),
            epoch: 0,
            lr: hyper.lr_at(0),
            momentum: hyper.momentum_at(0),
        }
    }

    pub fn set_epoch(&mut self, epoch: usize, hyper: &Hyperparams) {
        self.epoch = epoch;
        self.lr = hyper.lr_at(epoch);
        self.momentum = hyper.momentum_at(epoch);
    }
}

/// `velocity <- momentum * velocity - lr * grad`, then `params += velocity`.
/// `grads` are gradients of the loss, so the step descends.
pub fn sgd_step(params: &mut ModelParams, grads: &ParamGrads, state: &mut OptimizerState) -> Result<()> {
    let same_shape = |a: &[crate::model::LayerParams]| {
        a.len() == params.layers.len()
            && a.iter().zip(&params.layers).all(|(g, p)| {
                g.weights.len() == p.weights.len() && g.biases.len() == p.biases.len()
            })
    };
    if !same_shape(&grads.layers) || !same_shape(&state.velocity.layers) {
        return Err(shape("gradient or velocity does not match the parameters"));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let (lr, m) = (state.lr, state.momentum);
    for ((p, g), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity.layers)
    {
        for ((w, &gw), vw) in p.weights.iter_mut().zip(&g.weights).zip(&mut v.weights) {
            *vw = m * *vw - lr * gw;
            *w += *vw;
        }
        for ((b, &gb), vb) in p.biases.iter_mut().zip(&g.biases).zip(&mut v.biases) {
            *vb = m * *vb - lr * gb;
            *b += *vb;
        }
    }
    Ok(())
}

/// Which form of the boosting gradient to follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoostSign {
    /// Gradient of the ensemble log-likelihood: the expectation term is
    /// subtracted, giving output gradient `onehot(y) - p_ens`.
    #[default]
    Derived,
    /// The expectation term added instead of subtracted. Kept for
    /// comparison runs only.
    Printed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainCriterion {
    PlainSgd,
    /// A fresh mask per training example.
    Dropout(MaskPolicy),
    /// The same mask for every example and at test time.
    FixedMask(DropoutMask),
    DropoutBoosting { policy: MaskPolicy, sign: BoostSign },
}

impl TrainCriterion {
    pub fn boosting(policy: MaskPolicy) -> Self {
        Self::DropoutBoosting {
            policy,
            sign: BoostSign::Derived,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::PlainSgd => "sgd",
            Self::Dropout(_) => "dropout",
            Self::FixedMask(_) => "fixed-mask",
            Self::DropoutBoosting { .. } => "boosting",
        }
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        let sizes = &params.arch.hidden_sizes;
        match self {
            Self::PlainSgd => Ok(()),
            Self::Dropout(policy) | Self::DropoutBoosting { policy, .. } => {
                if policy.n_layers() != sizes.len() {
                    return Err(shape(format!(
                        "policy has {} layers, model has {} hidden layers",
                        policy.n_layers(),
                        sizes.len()
                    )));
                }
                Ok(())
            }
            Self::FixedMask(mask) => {
                if !mask.sizes().eq(sizes.iter().copied()) {
                    return Err(shape("fixed mask does not match the architecture"));
                }
                Ok(())
            }
        }
    }

    /// The predictor used to monitor validation error.
    pub fn monitor(&self) -> Predictor {
        match self {
            Self::PlainSgd => Predictor::Plain,
            Self::Dropout(policy) | Self::DropoutBoosting { policy, .. } => {
                Predictor::WeightScaled(policy.clone())
            }
            Self::FixedMask(mask) => Predictor::Masked(mask.clone()),
        }
    }
}

fn onehot(y: usize, n: usize) -> Vec<f64> {
    (0..n).map(|k| if k == y { 1.0 } else { 0.0 }).collect()
}

fn check_label(params: &ModelParams, y: usize) -> Result<()> {
    if y >= params.n_classes() {
        return Err(shape(format!(
            "label {y} out of range for {} classes",
            params.n_classes()
        )));
    }
    Ok(())
}

/// Negative log-likelihood of `y` under the (optionally masked) network,
/// with its gradient added into `grads` scaled by `weight`.
fn nll_into(
    params: &ModelParams,
    v: &[f64],
    y: usize,
    mask: Option<&DropoutMask>,
    weight: f64,
    grads: &mut ParamGrads,
) -> Result<f64> {
    let trace = params.forward(v, mask)?;
    let loss = -log_distribution(&trace.output_logits, params.output_kind)[y];
    let mut class_grad = squash(&trace.output_logits, params.output_kind);
    class_grad[y] -= 1.0;
    let out = class_grad_to_output(&class_grad, params.output_kind);
    params.backward_into(&trace, v, &out, mask, weight, grads)?;
    Ok(loss)
}

/// Boosting gradient for sub-network `mask` given the ensemble prediction
/// `p_ens`, added into `grads` scaled by `weight`. Returns the sub-network's
/// class distribution.
fn boosting_into(
    params: &ModelParams,
    v: &[f64],
    y: usize,
    mask: &DropoutMask,
    p_ens: &[f64],
    sign: BoostSign,
    weight: f64,
    grads: &mut ParamGrads,
) -> Result<Vec<f64>> {
    let trace = params.forward(v, Some(mask))?;
    let p_sub = squash(&trace.output_logits, params.output_kind);
    let target = onehot(y, p_ens.len());
    let class_grad: Vec<f64> = match sign {
        BoostSign::Derived => p_ens.iter().zip(&target).map(|(p, t)| p - t).collect(),
        BoostSign::Printed => p_sub
            .iter()
            .zip(p_ens)
            .zip(&target)
            .map(|((ps, pe), t)| 2.0 * ps - t - pe)
            .collect(),
    };
    let out = class_grad_to_output(&class_grad, params.output_kind);
    params.backward_into(&trace, v, &out, Some(mask), weight, grads)?;
    Ok(p_sub)
}

/// Descent-direction boosting gradient for one example under sub-network
/// `mask`, with the ensemble prediction supplied by the caller.
pub fn boosting_grad_with_ensemble(
    params: &ModelParams,
    v: &[f64],
    y: usize,
    mask: &DropoutMask,
    p_ens: &[f64],
    sign: BoostSign,
) -> Result<ParamGrads> {
    check_label(params, y)?;
    if p_ens.len() != params.n_classes() {
        return Err(shape("ensemble prediction has the wrong number of classes"));
    }
    let mut grads = ParamGrads::zeros_like(params);
    boosting_into(params, v, y, mask, p_ens, sign, 1.0, &mut grads)?;
    Ok(grads)
}

/// Adds one example's loss gradient (scaled by `weight`) into `grads` and
/// returns its loss. Masks are drawn from `mask_rng`.
fn accumulate<R: Rng + ?Sized>(
    criterion: &TrainCriterion,
    params: &ModelParams,
    v: &[f64],
    y: usize,
    mask_rng: &mut R,
    weight: f64,
    grads: &mut ParamGrads,
) -> Result<f64> {
    match criterion {
        TrainCriterion::PlainSgd => nll_into(params, v, y, None, weight, grads),
        TrainCriterion::Dropout(policy) => {
            let mask = sample_sizes(policy, &params.arch.hidden_sizes, mask_rng);
            nll_into(params, v, y, Some(&mask), weight, grads)
        }
        TrainCriterion::FixedMask(mask) => nll_into(params, v, y, Some(mask), weight, grads),
        TrainCriterion::DropoutBoosting { policy, sign } => {
            let mask = sample_sizes(policy, &params.arch.hidden_sizes, mask_rng);
            let logits = params.forward_scaled(v, policy.inclusion())?;
            let p_ens = squash(&logits, params.output_kind);
            boosting_into(params, v, y, &mask, &p_ens, *sign, weight, grads)?;
            // The objective being climbed is the ensemble likelihood.
            Ok(-log_distribution(&logits, params.output_kind)[y])
        }
    }
}

/// Loss and descent-direction gradient for one example.
pub fn loss_grad<R: Rng + ?Sized>(
    criterion: &TrainCriterion,
    params: &ModelParams,
    v: &[f64],
    y: usize,
    mask_rng: &mut R,
) -> Result<(f64, ParamGrads)> {
    criterion.check(params)?;
    check_label(params, y)?;
    let mut grads = ParamGrads::zeros_like(params);
    let loss = accumulate(criterion, params, v, y, mask_rng, 1.0, &mut grads)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, grads))
}

/// How a trained network turns inputs into class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Plain,
    WeightScaled(MaskPolicy),
    Masked(DropoutMask),
}

impl Predictor {
    pub fn predict(&self, params: &ModelParams, v: &[f64]) -> Result<Vec<f64>> {
        let logits = match self {
            Self::Plain => params.forward(v, None)?.output_logits,
            Self::WeightScaled(policy) => params.forward_scaled(v, policy.inclusion())?,
            Self::Masked(mask) => params.forward(v, Some(mask))?.output_logits,
        };
        output_distribution(&logits, params.output_kind)
    }

    pub fn error(&self, params: &ModelParams, data: &Dataset) -> Result<f64> {
        let probs = (0..data.len())
            .map(|i| self.predict(params, data.row(i)))
            .collect::<Result<Vec<_>>>()?;
        misclassification_rate(&probs, data.labels())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub best_valid_err: f64,
    pub best_epoch: usize,
    pub best_params: ModelParams,
    pub epochs_since_improvement: usize,
}

impl EarlyStopState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            best_valid_err: f64::INFINITY,
            best_epoch: 0,
            best_params: params.clone(),
            epochs_since_improvement: 0,
        }
    }

    /// Records an epoch's validation error. Only strict improvements reset
    /// the counter. Returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, valid_err: f64, params: &ModelParams, patience: usize) -> bool {
        if valid_err < self.best_valid_err {
            self.best_valid_err = valid_err;
            self.best_epoch = epoch;
            self.best_params = params.clone();
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        self.epochs_since_improvement >= patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example loss over the epoch's updates.
    pub train_loss: f64,
    pub valid_err: f64,
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
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

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,train_loss,valid_err,lr,momentum")?;
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.valid_err, r.lr, r.momentum
            )?;
        }
        Ok(())
    }
}

/// Independent streams for example order and mask sampling. Keeping them
/// apart means criteria that draw no masks see the same example order.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub order: ChaCha8Rng,
    pub mask: ChaCha8Rng,
}

impl TrainRngs {
    pub fn from_seeds(order_seed: u64, mask_seed: u64) -> Self {
        Self {
            order: ChaCha8Rng::seed_from_u64(order_seed),
            mask: ChaCha8Rng::seed_from_u64(mask_seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub params: ModelParams,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_valid_err: f64,
    pub epochs_run: usize,
}

/// Trains `params` on `train_set`, monitoring `valid_set`, and returns the
/// best-validation snapshot.
///
/// Norm caps are enforced after every update (over the active sub-network
/// for fixed-mask training, so masked-off weights keep their initial
/// values). The learning rate and momentum move once per epoch.
pub fn train(
    mut params: ModelParams,
    train_set: &Dataset,
    valid_set: &Dataset,
    criterion: &TrainCriterion,
    hyper: &Hyperparams,
    rngs: &mut TrainRngs,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    params.validate()?;
    criterion.check(&params)?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(invalid("training and validation sets must be nonempty"));
    }
    if params.arch.hidden_sizes != hyper.hidden_sizes {
        return Err(shape("model hidden sizes differ from the hyperparameters"));
    }
    for data in [train_set, valid_set] {
        if data.dim != params.arch.input_dim || data.n_classes != params.n_classes() {
            return Err(shape(format!(
                "dataset {} ({} inputs, {} classes) does not fit the model",
                data.name, data.dim, data.n_classes
            )));
        }
    }
    let constraints = hyper.norm_constraints()?;
    let constrained = !constraints.is_empty();
    let monitor = criterion.monitor();

    let mut state = OptimizerState::new(&params, hyper);
    let mut stop = EarlyStopState::new(&params);
    let mut history = TrainHistory::default();
    let mut grads = ParamGrads::zeros_like(&params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let diverged = |epoch: usize, reason: &str| Error::Diverged {
        epoch,
        reason: reason.to_string(),
    };

    for epoch in 0..hyper.max_epochs {
        state.set_epoch(epoch, hyper);
        order.shuffle(&mut rngs.order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            grads.fill_zero();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                loss_sum += accumulate(
                    criterion,
                    &params,
                    train_set.row(i),
                    train_set.label(i),
                    &mut rngs.mask,
                    weight,
                    &mut grads,
                )?;
            }
            if !loss_sum.is_finite() {
                return Err(diverged(epoch, "non-finite training loss"));
            }
            sgd_step(&mut params, &grads, &mut state).map_err(|e| match e {
                Error::NonFinite(what) => diverged(epoch, &format!("non-finite {what}")),
                other => other,
            })?;
            if constrained {
                match criterion {
                    TrainCriterion::FixedMask(mask) => params.project_norms_active(&constraints, mask)?,
                    _ => params.project_norms(&constraints)?,
                }
            }
        }
        let valid_err = match monitor.error(&params, valid_set) {
            Err(Error::NonFinite(_)) => return Err(diverged(epoch, "non-finite validation output")),
            other => other?,
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            valid_err,
            lr: state.lr,
            momentum: state.momentum,
        });
        if stop.observe(epoch, valid_err, &params, hyper.patience_epochs) {
            break;
        }
    }
    Ok(TrainOutcome {
        epochs_run: history.len(),
        params: stop.best_params,
        history,
        best_epoch: stop.best_epoch,
        best_valid_err: stop.best_valid_err,
    })
}
