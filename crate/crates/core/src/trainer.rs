//! Unsupervised primal-dual training.
//!
//! The loss is the Lagrangian of the sum-rate problem: the negated weighted
//! sum rate of the post-processed allocation plus multiplier-weighted budget
//! slack. Weights descend along its gradient; multipliers ascend along the
//! batch-mean slack and are projected back onto `λ ≥ 0`.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelInstance, NetworkConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gnn::{GnnModel, GraphFeatures, NormStats, PowerHead};
use crate::matrix::Matrix;
use crate::rate::{is_feasible, sum_rate_gradient, weighted_sum_rate};
use crate::rng::Rng;

/// Which powers enter the multiplier term of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualMode {
    /// The raw power head `p̂`, before row normalization.
    Pre,
    /// The post-processed allocation.
    Post,
}

impl FromStr for DualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(DualMode::Pre),
            "post" => Ok(DualMode::Post),
            other => Err(Error::Contract(format!("unknown dual mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Contract(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Primal step size.
    pub lr: f64,
    /// Dual step size.
    pub dual_lr: f64,
    pub optimizer: OptimizerKind,
    pub dual_mode: DualMode,
    pub seed: u64,
    /// Validate every this many epochs (the last epoch always validates).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            dual_lr: 1e-3,
            optimizer: OptimizerKind::Sgd,
            dual_mode: DualMode::Pre,
            seed: 0,
            val_every: 1,
        }
    }
}

/// Budget multipliers, one per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub step: f64,
}

impl DualState {
    pub fn new(pairs: usize, step: f64) -> Self {
        Self {
            lambda: vec![0.0; pairs],
            step,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.lambda.is_empty() {
            0.0
        } else {
            self.lambda.iter().sum::<f64>() / self.lambda.len() as f64
        }
    }
}

/// Projected ascent: `λ_i ← max(0, λ_i + step · violation_i)`.
pub fn dual_update(dual: &DualState, mean_violation: &[f64]) -> Result<DualState> {
    if mean_violation.len() != dual.lambda.len() {
        return Err(Error::Contract(format!(
            "expected {} violations, got {}",
            dual.lambda.len(),
            mean_violation.len()
        )));
    }
    let lambda = dual
        .lambda
        .iter()
        .zip(mean_violation)
        .map(|(l, v)| (l + dual.step * v).max(0.0))
        .collect();
    Ok(DualState {
        lambda,
        step: dual.step,
    })
}

/// Loss value and its gradient seed for one sample.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub sum_rate: f64,
    /// `Σ_m q_i^m - P_max` for each pair.
    pub slack: Vec<f64>,
    /// `∂loss/∂p̂`, ready for [`GnnModel::backward`].
    pub d_p_hat: Matrix,
}

/// Lagrangian loss of one sample given the power head output `p̂`.
pub fn loss(
    model: &GnnModel,
    p_hat: &Matrix,
    inst: &ChannelInstance,
    dual: &DualState,
    config: &NetworkConfig,
    mode: DualMode,
) -> Result<LossEval> {
    inst.check_shape(config)?;
    if dual.lambda.len() != inst.pairs() {
        return Err(Error::Contract(format!(
            "{} multipliers for {} pairs",
            dual.lambda.len(),
            inst.pairs()
        )));
    }
    let alloc = model.allocate(p_hat);
    let power = &alloc.power;
    let sum_rate = weighted_sum_rate(inst, power, config);
    let q = match mode {
        DualMode::Pre => p_hat,
        DualMode::Post => power,
    };
    let slack: Vec<f64> = (0..q.rows()).map(|i| q.row_sum(i) - config.p_max).collect();
    let penalty: f64 = dual.lambda.iter().zip(&slack).map(|(l, s)| l * s).sum();

    let mut d_power = sum_rate_gradient(inst, power, config).map(|g| -g);
    if mode == DualMode::Post {
        for (i, l) in dual.lambda.iter().enumerate() {
            d_power.row_mut(i).iter_mut().for_each(|g| *g += l);
        }
    }
    let mut d_p_hat = model.head_backward(p_hat, &d_power);
    if mode == DualMode::Pre {
        for (i, l) in dual.lambda.iter().enumerate() {
            d_p_hat.row_mut(i).iter_mut().for_each(|g| *g += l);
        }
    }
    Ok(LossEval {
        value: -sum_rate + penalty,
        sum_rate,
        slack,
        d_p_hat,
    })
}

/// Loss and parameter gradient for one sample.
pub fn sample_gradient(
    model: &GnnModel,
    feats: &GraphFeatures,
    inst: &ChannelInstance,
    dual: &DualState,
    config: &NetworkConfig,
    mode: DualMode,
) -> Result<(LossEval, Vec<f64>)> {
    let pass = model.forward(feats)?;
    let eval = loss(model, &pass.powers, inst, dual, config, mode)?;
    let grad = model.backward(feats, &pass, &eval.d_p_hat)?;
    Ok((eval, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_lagrangian: f64,
    pub val_sum_rate: f64,
    /// Mean positive part of `Σ_m p̂_i^m - P_max` over samples and pairs.
    pub violation: f64,
    pub mean_lambda: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Validation sum rate of the initial model.
    pub initial_val_sum_rate: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_lagrangian,val_sum_rate,violation,mean_lambda,wall_time_s\n");
        let _ = writeln!(out, "0,,{},,0,0", self.initial_val_sum_rate);
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, e.train_lagrangian, e.val_sum_rate, e.violation, e.mean_lambda, e.wall_time_s
            );
        }
        out
    }

    /// Equality of everything except wall-clock times.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        let strip = |log: &TrainLog| -> Vec<(usize, u64, u64, u64, u64)> {
            log.epochs
                .iter()
                .map(|e| {
                    (
                        e.epoch,
                        e.train_lagrangian.to_bits(),
                        e.val_sum_rate.to_bits(),
                        e.violation.to_bits(),
                        e.mean_lambda.to_bits(),
                    )
                })
                .collect()
        };
        self.initial_val_sum_rate.to_bits() == other.initial_val_sum_rate.to_bits()
            && self.best_epoch == other.best_epoch
            && strip(self) == strip(other)
    }
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Fresh model for `train`: stats fitted on the data, weights drawn from the
/// seed's stream.
pub fn init_model(train: &Dataset, tc: &TrainConfig, head: PowerHead) -> GnnModel {
    let stats = NormStats::fit(&train.samples);
    let mut rng = Rng::from_seed(tc.seed);
    GnnModel::init(&mut rng, stats, train.config.p_max).with_head(head)
}

fn mean_sum_rate(model: &GnnModel, feats: &[GraphFeatures], data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let rates: Vec<f64> = feats
        .par_iter()
        .zip(&data.samples)
        .map(|(f, inst)| -> Result<f64> {
            let p_hat = model.predict(f)?;
            Ok(weighted_sum_rate(inst, &model.allocate(&p_hat).power, &data.config))
        })
        .collect::<Result<_>>()?;
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Runs primal-dual training and returns the best-validation model.
pub fn train(train: &Dataset, val: &Dataset, init: GnnModel, tc: &TrainConfig) -> Result<(GnnModel, TrainLog)> {
    let cfg = &train.config;
    if (val.config.d, val.config.m) != (cfg.d, cfg.m) && !val.is_empty() {
        return Err(Error::Contract("training and validation sets differ in shape".into()));
    }
    if train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    if tc.batch_size == 0 || tc.batch_size > train.len() {
        return Err(Error::Contract(format!(
            "batch size {} must lie in 1..={}",
            tc.batch_size,
            train.len()
        )));
    }
    if !(tc.lr >= 0.0 && tc.dual_lr >= 0.0) {
        return Err(Error::Contract("step sizes must be nonnegative".into()));
    }

    let mut model = init;
    let train_feats: Vec<GraphFeatures> = train.samples.iter().map(|s| model.features(s)).collect();
    let val_feats: Vec<GraphFeatures> = val.samples.iter().map(|s| model.features(s)).collect();

    let mut rng = Rng::from_seed(tc.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut dual = DualState::new(cfg.d, tc.dual_lr);
    let mut adam = Adam::new(model.params().len());
    let mut log = TrainLog {
        initial_val_sum_rate: mean_sum_rate(&model, &val_feats, val)?,
        ..Default::default()
    };
    let mut best = (log.initial_val_sum_rate, model.clone());
    let mut last_val = log.initial_val_sum_rate;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let n_params = model.params().len();

    for epoch in 1..=tc.epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let (mut loss_sum, mut viol_sum, mut batches, mut viol_count) = (0.0, 0.0, 0usize, 0usize);

        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let results: Vec<(LossEval, Vec<f64>, f64)> = batch
                .par_iter()
                .map(|&k| {
                    let feats = &train_feats[k];
                    let pass = model.forward(feats)?;
                    let eval = loss(&model, &pass.powers, &train.samples[k], &dual, cfg, tc.dual_mode)?;
                    let grad = model.backward(feats, &pass, &eval.d_p_hat)?;
                    let over: f64 = (0..pass.powers.rows())
                        .map(|i| (pass.powers.row_sum(i) - cfg.p_max).max(0.0))
                        .sum();
                    Ok((eval, grad, over))
                })
                .collect::<Result<_>>()?;

            let scale = 1.0 / results.len() as f64;
            let mut grad = vec![0.0; n_params];
            let mut slack = vec![0.0; cfg.d];
            let mut batch_loss = 0.0;
            for (eval, g, over) in &results {
                for (acc, x) in grad.iter_mut().zip(g) {
                    *acc += x * scale;
                }
                for (acc, s) in slack.iter_mut().zip(&eval.slack) {
                    *acc += s * scale;
                }
                batch_loss += eval.value * scale;
                viol_sum += over;
                viol_count += cfg.d;
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    reason: format!("batch loss {batch_loss}"),
                });
            }
            match tc.optimizer {
                OptimizerKind::Sgd => {
                    for (p, g) in model.params_mut().iter_mut().zip(&grad) {
                        *p -= tc.lr * g;
                    }
                }
                OptimizerKind::Adam => adam.step(model.params_mut(), &grad, tc.lr),
            }
            dual = dual_update(&dual, &slack)?;
            loss_sum += batch_loss;
            batches += 1;
        }

        if epoch % tc.val_every.max(1) == 0 || epoch == tc.epochs {
            last_val = mean_sum_rate(&model, &val_feats, val)?;
            if last_val > best.0 {
                best = (last_val, model.clone());
                log.best_epoch = epoch;
            }
        }
        log.epochs.push(EpochLog {
            epoch,
            train_lagrangian: loss_sum / batches as f64,
            val_sum_rate: last_val,
            violation: viol_sum / viol_count.max(1) as f64,
            mean_lambda: dual.mean(),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    let mut model = best.1;
    model.metadata.seed = Some(tc.seed);
    model.metadata.dataset = Some(train.header());
    model.metadata.epochs = Some(tc.epochs);
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub sum_rate: f64,
    /// Largest per-pair total power in the allocation.
    pub max_pair_power: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean_sum_rate: f64,
    pub std_sum_rate: f64,
    pub violations: usize,
    pub mean_wall_time_s: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, total_time_s: f64) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = rows.iter().map(|r| r.sum_rate).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r.sum_rate - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean_sum_rate: mean,
            std_sum_rate: var.sqrt(),
            violations: rows.iter().filter(|r| !r.feasible).count(),
            mean_wall_time_s: total_time_s / n,
            rows,
        }
    }

    /// Per-instance rows; deterministic for a given model and dataset.
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("index,sum_rate,max_pair_power,feasible\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.index, r.sum_rate, r.max_pair_power, r.feasible);
        }
        out
    }
}

/// Runs the model on every sample and audits the allocations.
pub fn evaluate(model: &GnnModel, data: &Dataset) -> Result<EvalReport> {
    if (model.p_max - data.config.p_max).abs() > 1e-12 * data.config.p_max {
        return Err(Error::Contract(format!(
            "model was built for p_max {} but data uses {}",
            model.p_max, data.config.p_max
        )));
    }
    let started = Instant::now();
    let rows = data
        .samples
        .iter()
        .enumerate()
        .map(|(index, inst)| {
            let alloc = model.infer(inst)?;
            Ok(EvalRow {
                index,
                sum_rate: weighted_sum_rate(inst, &alloc.power, &data.config),
                max_pair_power: (0..alloc.power.rows())
                    .map(|i| alloc.power.row_sum(i))
                    .fold(0.0, f64::max),
                feasible: is_feasible(&alloc.power, data.config.p_max),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows, started.elapsed().as_secs_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate::compute_lagrangian;

    #[test]
    fn dual_projection() {
        let d = DualState {
            lambda: vec![0.0, 0.1],
            step: 0.1,
        };
        let next = dual_update(&d, &[-0.3, 0.5]).unwrap();
        assert_eq!(next.lambda[0], 0.0);
        assert!((next.lambda[1] - 0.15).abs() < 1e-15);
        let frozen = dual_update(
            &DualState {
                lambda: vec![0.4],
                step: 0.0,
            },
            &[7.0],
        )
        .unwrap();
        assert_eq!(frozen.lambda, vec![0.4]);
    }

    #[test]
    fn zero_multipliers_give_negative_rate() {
        let cfg = NetworkConfig::new(3, 2);
        let inst = crate::channel::sample_at(&cfg, 0);
        let model = GnnModel::init(&mut Rng::from_seed(1), NormStats::IDENTITY, 1.0);
        let p_hat = model.predict(&model.features(&inst)).unwrap();
        let l = loss(&model, &p_hat, &inst, &DualState::new(3, 0.1), &cfg, DualMode::Pre).unwrap();
        assert_eq!(l.value, -l.sum_rate);
    }

    #[test]
    fn post_mode_slack_is_nonpositive() {
        let cfg = NetworkConfig::new(4, 3);
        let inst = crate::channel::sample_at(&cfg, 1);
        let model = GnnModel::zeros(NormStats::IDENTITY, 1.0);
        let p_hat = model.predict(&model.features(&inst)).unwrap();
        let dual = DualState {
            lambda: vec![0.5; 4],
            step: 0.1,
        };
        let l = loss(&model, &p_hat, &inst, &dual, &cfg, DualMode::Post).unwrap();
        assert!(l.slack.iter().all(|&s| s <= 1e-12));
        assert!(l.value + l.sum_rate <= 1e-12);
    }

    #[test]
    fn loss_matches_lagrangian() {
        let cfg = NetworkConfig::new(4, 2);
        let inst = crate::channel::sample_at(&cfg, 2);
        let model = GnnModel::init(&mut Rng::from_seed(3), NormStats::fit([&inst]), 1.0);
        let p_hat = model.predict(&model.features(&inst)).unwrap();
        let dual = DualState {
            lambda: vec![0.2, 0.0, 1.3, 0.7],
            step: 0.1,
        };
        let post = loss(&model, &p_hat, &inst, &dual, &cfg, DualMode::Post).unwrap();
        let alloc = model.allocate(&p_hat);
        let expected = compute_lagrangian(&inst, &alloc.power, &dual.lambda, &cfg).unwrap();
        assert!((post.value - expected).abs() < 1e-12);
    }
}
