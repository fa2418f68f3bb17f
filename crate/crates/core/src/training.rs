//! Training: decoupled-weight-decay Adam and the diffusion training loop
//! (uniform timestep draws, joint conditional dropout, forward noising,
//! exact gradients, per-epoch loss logging).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{CellGraph, SearchSpaceSpec};
use crate::conditioning::{drop_conditions, ConditionSchema, ConditionVector};
use crate::denoiser::{grad, init_params, DenoiserConfig, DenoiserDims, ParamSet, TrainSample};
use crate::error::CoreError;
use crate::noise::{apply_noise, build_schedule, empirical_marginals, DiffusionSchedule, Marginals};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Joint conditional-dropout rate.
    pub epsilon: f64,
    /// Edge-loss weight.
    pub lambda_edge: f64,
    pub t_max: usize,
    pub schedule_s: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr: 2e-4,
            weight_decay: 1e-12,
            epsilon: 0.1,
            lambda_edge: 5.0,
            t_max: 500,
            schedule_s: 0.008,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), CoreError> {
        let bad = |field: &str, reason: &str| {
            Err(CoreError::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return bad("weight_decay", "must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon", "must be in [0, 1]");
        }
        if self.lambda_edge < 0.0 {
            return bad("lambda_edge", "must be >= 0");
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay: the decay multiplies parameters by
/// (1 - wd) directly, independent of the learning rate, so decay acts even
/// at lr = 0 while the moment buffers only ever reflect gradients.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: ParamSet,
    v: ParamSet,
}

impl AdamW {
    pub fn new(template: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: template.zeros_like(),
            v: template.zeros_like(),
        }
    }

    pub fn moments(&self) -> (&ParamSet, &ParamSet) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .entries
            .iter_mut()
            .zip(&grads.entries)
            .zip(self.m.entries.iter_mut().zip(self.v.entries.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] =
                    p.data[i] * (1.0 - self.weight_decay) - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Everything training produces that sampling later needs.
pub struct TrainOutput {
    pub params: ParamSet,
    pub dims: DenoiserDims,
    pub schedule: DiffusionSchedule,
    pub marginals: Marginals,
    pub loss_log: Vec<StepLoss>,
}

impl TrainOutput {
    /// Mean loss per epoch, derived from the per-step log.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for s in &self.loss_log {
            if s.epoch >= sums.len() {
                sums.resize(s.epoch + 1, (0.0, 0));
            }
            sums[s.epoch].0 += s.loss;
            sums[s.epoch].1 += 1;
        }
        sums.iter().map(|&(sum, n)| sum / n as f64).collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_log.last().map_or(f64::NAN, |s| s.loss)
    }
}

/// Noise one batch and take one optimizer step; returns the batch mean loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ParamSet,
    opt: &mut AdamW,
    dcfg: &DenoiserConfig,
    dims: &DenoiserDims,
    cfg: &TrainConfig,
    schedule: &DiffusionSchedule,
    marginals: &Marginals,
    batch: &[(CellGraph, ConditionVector)],
    rng: &mut ChaCha8Rng,
) -> Result<f64, CoreError> {
    let mut samples = Vec::with_capacity(batch.len());
    for (cell, cond) in batch {
        let t = rng.gen_range(1..=schedule.t_max);
        let dropped = drop_conditions(cond, cfg.epsilon, rng);
        let noisy = apply_noise(cell, t, schedule, marginals, rng)?;
        samples.push(TrainSample {
            noisy,
            t,
            cond: dropped,
            clean: cell.clone(),
        });
    }
    let needs_dropout = dcfg.dropout > 0.0;
    let (loss, grads) = grad(
        params,
        dcfg,
        dims,
        &samples,
        cfg.lambda_edge,
        schedule.t_max,
        if needs_dropout { Some(rng) } else { None },
    )?;
    opt.step(params, &grads);
    Ok(loss)
}

pub fn dims_for(space: &SearchSpaceSpec, schema: &ConditionSchema) -> DenoiserDims {
    DenoiserDims {
        n_nodes: space.n_nodes,
        n_ops: space.op_vocab.len(),
        n_edge_cats: space.edge_vocab.len(),
        cond_card: schema.conditions.iter().map(|c| c.d).collect(),
    }
}

/// Full training run; deterministic given the seed.
pub fn train(
    space: &SearchSpaceSpec,
    schema: &ConditionSchema,
    dataset: &[(CellGraph, ConditionVector)],
    cfg: &TrainConfig,
    dcfg: &DenoiserConfig,
    seed: u64,
) -> Result<TrainOutput, CoreError> {
    cfg.check()?;
    dcfg.check()?;
    space.check()?;
    schema.check()?;
    if dataset.is_empty() {
        return Err(CoreError::EmptyInput("training dataset".into()));
    }
    let dims = dims_for(space, schema);
    let cells: Vec<CellGraph> = dataset.iter().map(|(c, _)| c.clone()).collect();
    let marginals = empirical_marginals(&cells, dims.n_ops, dims.n_edge_cats)?;
    marginals.check()?;
    let schedule = build_schedule(cfg.t_max, cfg.schedule_s)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(dcfg, &dims, &mut rng);
    let mut opt = AdamW::new(&params, cfg.lr, cfg.weight_decay);
    let mut loss_log = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(CellGraph, ConditionVector)> =
                chunk.iter().map(|&i| dataset[i].clone()).collect();
            let loss = train_step(
                &mut params,
                &mut opt,
                dcfg,
                &dims,
                cfg,
                &schedule,
                &marginals,
                &batch,
                &mut rng,
            )?;
            loss_log.push(StepLoss { step, epoch, loss });
            step += 1;
        }
    }
    Ok(TrainOutput {
        params,
        dims,
        schedule,
        marginals,
        loss_log,
    })
}

/// Render the per-step loss log as CSV.
pub fn loss_log_csv(log: &[StepLoss]) -> String {
    let mut out = String::from("step,epoch,loss\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.step, e.epoch, e.loss));
    }
    out
}
