//! Masked regression losses, the Adam optimizer and the training loop.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::experiment::{self, EvalSet};
use crate::network::{self, ModelGrads, ModelState, NetworkSpec};
use crate::tensor::{Mask, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    L2,
    L1,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L2 => "l2",
            LossKind::L1 => "l1",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(LossKind::L2),
            "l1" => Ok(LossKind::L1),
            _ => Err(Error::invalid(format!("unknown loss {s:?} (expected l2 or l1)"))),
        }
    }
}

/// Mean loss over pixels where `valid` is set, and its gradient with respect
/// to `pred`. The gradient is exactly zero at invalid pixels; the L1
/// subgradient at zero error is 0.
pub fn masked_loss(pred: &Tensor4, target: &Tensor4, valid: &Mask, kind: LossKind) -> Result<(f64, Tensor4)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("masked_loss", pred.shape(), target.shape()));
    }
    valid.check_aligned(pred, "masked_loss")?;
    let s = pred.shape();
    let count = valid.count() * s.c;
    if count == 0 {
        return Err(Error::DegenerateLoss { batch: None });
    }
    let inv = 1.0 / count as f64;
    let plane = s.plane();
    let mut grad = vec![0.0; s.len()];
    let mut total = 0.0;
    for n in 0..s.n {
        let m = &valid.data()[n * plane..(n + 1) * plane];
        for c in 0..s.c {
            let base = s.index(n, c, 0, 0);
            for i in 0..plane {
                if m[i] == 0.0 {
                    continue;
                }
                let e = pred.data()[base + i] - target.data()[base + i];
                match kind {
                    LossKind::L2 => {
                        total += e * e;
                        grad[base + i] = 2.0 * e * inv;
                    }
                    LossKind::L1 => {
                        total += e.abs();
                        grad[base + i] = if e > 0.0 {
                            inv
                        } else if e < 0.0 {
                            -inv
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
    Ok((total * inv, Tensor4::from_raw(s, grad)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Seeds weight initialization.
    pub seed: u64,
    /// Evaluate every this many iterations; 0 disables evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::L2,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 2000,
            batch_size: 8,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter, flattened per
/// layer as weights followed by biases.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &ModelState) -> Self {
        let zeros: Vec<Vec<f64>> = model.layers.iter().map(|p| vec![0.0; p.num_params()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(model: &mut ModelState, grads: &ModelGrads, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.layers.len() != model.layers.len() || state.first.len() != model.layers.len() {
        return Err(Error::invalid("gradient/optimizer state does not match model layers"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (li, (p, g)) in model.layers.iter_mut().zip(&grads.layers).enumerate() {
        let nw = p.weights().shape().len();
        if g.d_weights.shape() != p.weights().shape() || g.d_bias.len() != p.bias().len() {
            return Err(Error::shape("adam_step", g.d_weights.shape(), p.weights().shape()));
        }
        let (m, v) = (&mut state.first[li], &mut state.second[li]);
        let update = |theta: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *theta -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        };
        let (mw, mb) = m.split_at_mut(nw);
        let (vw, vb) = v.split_at_mut(nw);
        for (((theta, &gi), mi), vi) in p.weights_mut().iter_mut().zip(g.d_weights.data()).zip(mw).zip(vw) {
            update(theta, gi, mi, vi);
        }
        for (((theta, &gi), mi), vi) in p.bias_mut().iter_mut().zip(&g.d_bias).zip(mb).zip(vb) {
            update(theta, gi, mi, vi);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    /// 1-based iteration index (the record is written after the update).
    pub iter: usize,
    pub loss: f64,
    pub eval_mae: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// `iter,loss,eval_mae` with an empty `eval_mae` cell when not evaluated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss,eval_mae\n");
        for r in &self.records {
            let mae = r.eval_mae.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.iter, r.loss, mae));
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Trains a freshly initialized network on batches from `source`.
///
/// When `validation` is given and `cfg.eval_every > 0`, the model's MAE on
/// the validation set is logged every `eval_every` iterations.
pub fn train(
    spec: &NetworkSpec,
    source: &mut dyn DataSource,
    cfg: &TrainConfig,
    validation: Option<&EvalSet>,
) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    let mut model = network::build(spec, cfg.seed)?;
    let mut adam = AdamState::new(&model);
    let mut log = TrainLog::default();
    for it in 0..cfg.iterations {
        let batch = source.batch(it, cfg.batch_size)?;
        let (pred, _, cache) = network::forward(&model, &batch.depth, &batch.mask)?;
        let (loss, d_pred) =
            masked_loss(&pred, &batch.target, &batch.target_valid, cfg.loss).map_err(|e| match e {
                Error::DegenerateLoss { .. } => Error::DegenerateLoss { batch: Some(it) },
                other => other,
            })?;
        let grads = network::backward(&model, &cache, &d_pred)?;
        adam_step(&mut model, &grads, &mut adam, cfg)?;
        let eval_mae = match validation {
            Some(set) if cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 => {
                Some(experiment::evaluate_model(&model, set)?.mae)
            }
            _ => None,
        };
        log.records.push(LogRecord {
            iter: it + 1,
            loss,
            eval_mae,
        });
    }
    Ok((model, log))
}
