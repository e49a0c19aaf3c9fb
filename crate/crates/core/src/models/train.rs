//! Mini-batch Adam training with teacher forcing.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::math::{Matrix, SeededRng};

use super::config::ModelConfig;
use super::loss::{loss_and_gradients, LossBreakdown, Pair};
use super::network::Model;
use super::params::Gradients;

/// Optimiser and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LabError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LabError::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(LabError::Config("Adam betas must be in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Mean training loss of one epoch (token-weighted over all batches).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

pub const LOSS_LOG_HEADER: &str = "epoch,total,decoder_nll,source_nll";

/// Loss log as CSV with header [`LOSS_LOG_HEADER`].
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for e in log {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            e.epoch, e.loss.total, e.loss.decoder_nll, e.loss.source_nll
        ));
    }
    out
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: TrainConfig,
    m: Gradients,
    v: Gradients,
    step: i32,
}

impl Adam {
    pub fn new(model: &Model, cfg: TrainConfig) -> Self {
        let zeros = Gradients::zeros_like(model.params());
        Self { cfg, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn update(&mut self, model: &mut Model, grads: &Gradients) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            update_moment(m, g, c.beta1, |x| x);
            let v = self.v.get_mut(id);
            update_moment(v, g, c.beta2, |x| x * x);
            let (m, v) = (self.m.get(id), self.v.get(id));
            let p = model.params_mut().get_mut(id);
            for ((p, m), v) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *p -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            }
        }
    }
}

fn update_moment(moment: &mut Matrix, g: &Matrix, beta: f64, f: impl Fn(f64) -> f64) {
    for (m, g) in moment.data_mut().iter_mut().zip(g.data()) {
        *m = beta * *m + (1.0 - beta) * f(*g);
    }
}

/// Trained model together with its per-epoch loss log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Initialises a model from `seed` and trains it on `pairs`.
///
/// Batch order and dropout masks are drawn from streams derived from `seed`, so
/// identical inputs give identical parameters and logs.
pub fn train(config: ModelConfig, pairs: &[Pair], opt: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let mut master = SeededRng::new(seed);
    let model = Model::new(config, master.next_u64())?;
    train_model(model, pairs, opt, &mut master)
}

/// Continues training `model`; randomness comes from `rng`.
pub fn train_model(mut model: Model, pairs: &[Pair], opt: &TrainConfig, rng: &mut SeededRng) -> Result<TrainOutcome> {
    opt.validate()?;
    if pairs.is_empty() {
        return Err(LabError::InvalidArgument("training corpus is empty".into()));
    }
    let mut order_rng = rng.fork();
    let mut dropout_rng = rng.fork();
    let use_dropout = model.config().dropout > 0.0;
    let mut adam = Adam::new(&model, opt.clone());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(opt.epochs);
    for epoch in 1..=opt.epochs {
        order_rng.shuffle(&mut order);
        let mut parts = Vec::with_capacity(order.len().div_ceil(opt.batch_size));
        for chunk in order.chunks(opt.batch_size) {
            let batch: Vec<Pair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let rng = if use_dropout { Some(&mut dropout_rng) } else { None };
            let (loss, grads) = match loss_and_gradients(&model, &batch, rng) {
                Ok(r) => r,
                Err(LabError::NonFinite(_)) => return Err(LabError::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(LabError::Diverged { epoch });
            }
            adam.update(&mut model, &grads);
            parts.push(loss);
        }
        log.push(EpochLog { epoch, loss: LossBreakdown::combine(&parts)? });
    }
    Ok(TrainOutcome { model, log })
}
