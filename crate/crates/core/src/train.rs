//! RMSE loss, decoupled-decay Adam, the training loop, learning-rate range
//! finding and two-stage hyperparameter search.

use crate::error::{Error, Result};
use crate::patchset::{DataSplit, Sample};
use crate::rarefynet::{patch_to_tensor, RarefyConfig, RarefyModel};
use crate::nn::Tensor3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Record wall-clock seconds per epoch. Off by default so reports are
    /// byte-identical across runs.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            eta: 5e-4,
            alpha: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// First and second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// Root-mean-square error.
pub fn loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions, targets)?;
    let ss: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / predictions.len() as f64).sqrt())
}

/// Gradient of [`loss`] with respect to each prediction. Zero at zero loss.
pub fn loss_grad(predictions: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    let l = loss(predictions, targets)?;
    let m = predictions.len() as f64;
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| if l > 0.0 { (p - t) / (m * l) } else { 0.0 })
        .collect())
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// One AdamW update in place. Weight decay uses the pre-step value.
pub fn adamw_step(theta: &mut [f64], grads: &[f64], state: &mut OptimizerState, config: &TrainConfig) -> Result<()> {
    if theta.len() != grads.len() || state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(Error::ShapeMismatch(format!(
            "theta {}, grads {}, moments {}/{}",
            theta.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for i in 0..theta.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let old = theta[i];
        theta[i] = old - config.eta * m_hat / (v_hat.sqrt() + config.eps) - config.eta * config.alpha * old;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    /// `None` for epochs where the test set is empty.
    pub test_loss: Vec<Option<f64>>,
    pub seconds: Vec<f64>,
    /// Where the final parameters were written, when the caller saved them.
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.train_loss.last().copied()
    }

    /// CSV with header `epoch,train_loss,test_loss,seconds`; epochs count from 1.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_loss", "test_loss", "seconds"])?;
        for e in 0..self.epochs() {
            let test = self.test_loss[e].map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                (e + 1).to_string(),
                self.train_loss[e].to_string(),
                test,
                self.seconds[e].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn tensors_and_targets(samples: &[Sample]) -> (Vec<Tensor3>, Vec<f64>) {
    samples.iter().map(|s| (patch_to_tensor(&s.input), s.target)).unzip()
}

/// Eval-mode RMSE over a sample set, `None` when empty.
pub fn evaluate(model: &RarefyModel, samples: &[Sample]) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let (inputs, targets) = tensors_and_targets(samples);
    let (preds, _) = model.forward_eval(&inputs)?;
    Ok(Some(loss(&preds, &targets)?))
}

/// Forward, backward, running-statistic update and one optimizer step on a
/// mini-batch. Returns the batch sum of squared errors.
fn train_step(
    model: &mut RarefyModel,
    batch: &[&Sample],
    state: &mut OptimizerState,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let inputs: Vec<Tensor3> = batch.iter().map(|s| patch_to_tensor(&s.input)).collect();
    let targets: Vec<f64> = batch.iter().map(|s| s.target).collect();
    let (preds, tape) = model.forward_train(&inputs, rng)?;
    let sse: f64 = preds.iter().zip(&targets).map(|(p, t)| (p - t) * (p - t)).sum();
    if !sse.is_finite() {
        return Ok(sse);
    }
    let upstream = loss_grad(&preds, &targets)?;
    let (grads, _) = model.backward(&tape, &upstream)?;
    model.commit_running_stats(&tape);
    let mut theta = model.params().flatten();
    adamw_step(&mut theta, &grads.flatten(), state, config)?;
    model.params_mut().assign(&theta)?;
    Ok(sse)
}

/// Trains `model` in place with constant learning rate.
///
/// Each epoch reshuffles the training set, runs every mini-batch (the last
/// one may be short) in train mode, and records the epoch RMSE over all
/// train-mode predictions together with the eval-mode test RMSE.
pub fn train(model: &mut RarefyModel, split: &DataSplit, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(model.param_count());
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &split.train[i]).collect();
            let batch_sse = train_step(model, &batch, &mut state, config, &mut rng)?;
            if !batch_sse.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            sse += batch_sse;
        }
        let train_loss = (sse / split.train.len() as f64).sqrt();
        let test_loss = evaluate(model, &split.test)?;
        if !train_loss.is_finite() || test_loss.is_some_and(|l| !l.is_finite()) {
            return Err(Error::DivergedLoss { epoch });
        }
        report.train_loss.push(train_loss);
        report.test_loss.push(test_loss);
        report.seconds.push(if config.record_timing { start.elapsed().as_secs_f64() } else { 0.0 });
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrPoint {
    pub eta: f64,
    pub loss: f64,
    pub smoothed: f64,
}

const LR_SMOOTHING: f64 = 0.98;
const LR_DIVERGENCE_FACTOR: f64 = 4.0;

/// Learning-rate range test on a fresh copy of `model`.
///
/// The rate grows geometrically from `eta_min` to `eta_max` over `steps`
/// mini-batches. Loss is exponentially smoothed with bias correction; the
/// sweep stops early once the smoothed loss exceeds four times its minimum
/// or any loss is non-finite.
pub fn lr_range_test(
    model: &RarefyModel,
    samples: &[Sample],
    eta_min: f64,
    eta_max: f64,
    steps: usize,
    config: &TrainConfig,
) -> Result<Vec<LrPoint>> {
    if !(eta_min > 0.0 && eta_min < eta_max && eta_max.is_finite()) || steps < 2 {
        return Err(Error::InvalidRange(format!("eta {eta_min}..{eta_max} over {steps} steps")));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(probe.param_count());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let batch_size = config.batch_size.max(1);
    let ratio = (eta_max / eta_min).ln();
    let mut curve = Vec::with_capacity(steps);
    let (mut avg, mut best) = (0.0, f64::INFINITY);
    let mut cursor = 0;
    for i in 0..steps {
        let eta = eta_min * (ratio * i as f64 / (steps - 1) as f64).exp();
        let batch: Vec<&Sample> = (0..batch_size.min(samples.len()))
            .map(|j| &samples[order[(cursor + j) % samples.len()]])
            .collect();
        cursor = (cursor + batch.len()) % samples.len();
        let step_config = TrainConfig { eta, ..config.clone() };
        let sse = match train_step(&mut probe, &batch, &mut state, &step_config, &mut rng) {
            Ok(v) => v,
            Err(Error::NonFiniteGradient) => f64::NAN,
            Err(e) => return Err(e),
        };
        let l = (sse / batch.len() as f64).sqrt();
        if !l.is_finite() {
            break;
        }
        avg = LR_SMOOTHING * avg + (1.0 - LR_SMOOTHING) * l;
        let smoothed = avg / (1.0 - LR_SMOOTHING.powi(i as i32 + 1));
        curve.push(LrPoint { eta, loss: l, smoothed });
        best = best.min(smoothed);
        if smoothed > LR_DIVERGENCE_FACTOR * best {
            break;
        }
    }
    Ok(curve)
}

/// Points up to and including the smoothed-loss minimum: the rates worth
/// considering.
pub fn lr_candidates(curve: &[LrPoint]) -> &[LrPoint] {
    let Some(min_at) = curve
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.smoothed.total_cmp(&b.1.smoothed))
        .map(|(i, _)| i)
    else {
        return &[];
    };
    &curve[..=min_at]
}

/// A conventional pick: one tenth of the rate at the smoothed-loss minimum.
pub fn suggest_eta(curve: &[LrPoint]) -> Option<f64> {
    lr_candidates(curve).last().map(|p| p.eta / 10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamRange {
    Fixed { value: f64 },
    Choices { values: Vec<f64> },
    LogUniform { low: f64, high: f64 },
}

impl ParamRange {
    fn validate(&self) -> Result<()> {
        match self {
            ParamRange::Fixed { value } if value.is_finite() => Ok(()),
            ParamRange::Choices { values } if !values.is_empty() && values.iter().all(|v| v.is_finite()) => Ok(()),
            ParamRange::LogUniform { low, high } if *low > 0.0 && low <= high && high.is_finite() => Ok(()),
            _ => Err(Error::EmptySpace),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            ParamRange::Fixed { value } => *value,
            ParamRange::Choices { values } => values[rng.random_range(0..values.len())],
            ParamRange::LogUniform { low, high } if low == high => *low,
            ParamRange::LogUniform { low, high } => rng.random_range(low.ln()..high.ln()).exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub eta: ParamRange,
    pub alpha: ParamRange,
    pub batch_size: ParamRange,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            eta: ParamRange::LogUniform { low: 1e-4, high: 1e-2 },
            alpha: ParamRange::Choices { values: vec![0.0, 1e-3, 1e-2] },
            batch_size: ParamRange::Choices { values: vec![32.0, 64.0] },
        }
    }
}

/// Multipliers applied around the stage-1 winner, and the epoch budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineGrid {
    pub eta_factors: Vec<f64>,
    pub alpha_factors: Vec<f64>,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Fraction of the training set used by the search.
    pub subset_fraction: f64,
}

impl Default for RefineGrid {
    fn default() -> Self {
        Self {
            eta_factors: vec![0.5, 1.0, 2.0],
            alpha_factors: vec![0.5, 1.0, 2.0],
            stage1_epochs: 5,
            stage2_epochs: 10,
            subset_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub stage: u8,
    pub index: usize,
    pub eta: f64,
    pub alpha: f64,
    pub batch_size: usize,
    /// Infinite when training diverged.
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best: TrainConfig,
    pub trials: Vec<Trial>,
}

impl SearchOutcome {
    /// Trials ordered by validation loss, ties kept in evaluation order.
    pub fn leaderboard(&self) -> Vec<&Trial> {
        let mut out: Vec<&Trial> = self.trials.iter().collect();
        out.sort_by(|a, b| a.val_loss.total_cmp(&b.val_loss));
        out
    }

    pub fn write_leaderboard_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rank", "stage", "trial", "eta", "alpha", "batch_size", "val_loss"])?;
        for (rank, t) in self.leaderboard().into_iter().enumerate() {
            w.write_record([
                (rank + 1).to_string(),
                t.stage.to_string(),
                t.index.to_string(),
                t.eta.to_string(),
                t.alpha.to_string(),
                t.batch_size.to_string(),
                t.val_loss.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Random search on a subset of the training data, then a grid around the
/// winner. Every trial starts from the same initial weights and reports
/// eval-mode RMSE on a held-out fifth of the subset.
pub fn hyper_search(
    model_config: &RarefyConfig,
    split: &DataSplit,
    space: &SearchSpace,
    budget: usize,
    refine: &RefineGrid,
    base: &TrainConfig,
    seed: u64,
) -> Result<SearchOutcome> {
    space.eta.validate()?;
    space.alpha.validate()?;
    space.batch_size.validate()?;
    if budget == 0 {
        return Err(Error::InvalidConfig("search budget must be at least 1".into()));
    }
    if !(refine.subset_fraction > 0.0 && refine.subset_fraction <= 1.0) {
        return Err(Error::InvalidConfig("subset_fraction must lie in (0, 1]".into()));
    }
    let originals: Vec<&Sample> = split.train.iter().filter(|s| !s.augmented).collect();
    let pool: Vec<&Sample> = if originals.len() >= 2 { originals } else { split.train.iter().collect() };
    if pool.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let take = ((pool.len() as f64 * refine.subset_fraction).ceil() as usize).clamp(2, pool.len());
    let n_val = (take / 5).max(1);
    let subset = DataSplit {
        train: order[n_val..take].iter().map(|&i| pool[i].clone()).collect(),
        test: order[..n_val].iter().map(|&i| pool[i].clone()).collect(),
        seed,
    };
    let init = RarefyModel::build(model_config.clone(), seed)?;

    let run = |eta: f64, alpha: f64, batch_size: usize, epochs: usize| -> Result<f64> {
        let config = TrainConfig { eta, alpha, batch_size, epochs, seed, ..base.clone() };
        if config.validate().is_err() {
            return Ok(f64::INFINITY);
        }
        let mut model = init.clone();
        match train(&mut model, &subset, &config) {
            Ok(_) => Ok(evaluate(&model, &subset.test)?.filter(|l| l.is_finite()).unwrap_or(f64::INFINITY)),
            Err(Error::DivergedLoss { .. } | Error::NonFiniteGradient) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    };

    let mut trials = Vec::new();
    for index in 0..budget {
        let eta = space.eta.sample(&mut rng);
        let alpha = space.alpha.sample(&mut rng);
        let batch_size = space.batch_size.sample(&mut rng).round().max(1.0) as usize;
        let val_loss = run(eta, alpha, batch_size, refine.stage1_epochs)?;
        trials.push(Trial { stage: 1, index, eta, alpha, batch_size, val_loss });
    }
    let winner = best_trial(&trials).clone();
    let mut index = 0;
    for &fe in &refine.eta_factors {
        for &fa in &refine.alpha_factors {
            let (eta, alpha) = (winner.eta * fe, winner.alpha * fa);
            let val_loss = run(eta, alpha, winner.batch_size, refine.stage2_epochs)?;
            trials.push(Trial { stage: 2, index, eta, alpha, batch_size: winner.batch_size, val_loss });
            index += 1;
        }
    }
    let best = best_trial(&trials);
    Ok(SearchOutcome {
        best: TrainConfig { eta: best.eta, alpha: best.alpha, batch_size: best.batch_size, ..base.clone() },
        trials,
    })
}

fn best_trial(trials: &[Trial]) -> &Trial {
    trials
        .iter()
        .reduce(|a, b| if b.val_loss < a.val_loss { b } else { a })
        .expect("at least one trial")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(loss(&[3.0], &[1.0]).unwrap(), 2.0);
        let l = loss(&[1.0, 2.0, 3.0], &[2.0, 2.0, 5.0]).unwrap();
        assert!((l - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(matches!(loss(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(loss(&[], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn loss_grad_matches_difference_quotient() {
        let (p, t) = (vec![0.2, 0.9, -0.4], vec![0.1, 0.5, 0.0]);
        let g = loss_grad(&p, &t).unwrap();
        for i in 0..3 {
            let mut up = p.clone();
            let mut dn = p.clone();
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let num = (loss(&up, &t).unwrap() - loss(&dn, &t).unwrap()) / 2e-6;
            assert!((g[i] - num).abs() < 1e-8);
        }
        assert_eq!(loss_grad(&t, &t).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn adam_first_step_example() {
        let config = TrainConfig { alpha: 0.0, ..TrainConfig::default() };
        let mut theta = [1.0];
        let mut state = OptimizerState::new(1);
        adamw_step(&mut theta, &[1.0], &mut state, &config).unwrap();
        assert!((theta[0] - (1.0 - 5e-4 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradients() {
        let mut config = TrainConfig { alpha: 0.0, ..TrainConfig::default() };
        let mut theta = [0.5, -2.0];
        let mut state = OptimizerState::new(2);
        adamw_step(&mut theta, &[0.0, 0.0], &mut state, &config).unwrap();
        assert_eq!(theta, [0.5, -2.0]);
        config.alpha = 0.01;
        adamw_step(&mut theta, &[0.0, 0.0], &mut state, &config).unwrap();
        let f = 1.0 - config.eta * config.alpha;
        assert!((theta[0] - 0.5 * f).abs() <= f64::EPSILON);
        assert!((theta[1] + 2.0 * f).abs() <= 2.0 * f64::EPSILON);
    }

    #[test]
    fn adam_errors() {
        let config = TrainConfig::default();
        let mut state = OptimizerState::new(2);
        assert!(matches!(
            adamw_step(&mut [1.0, 2.0], &[1.0], &mut state, &config),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            adamw_step(&mut [1.0, 2.0], &[1.0, f64::NAN], &mut state, &config),
            Err(Error::NonFiniteGradient)
        ));
        assert_eq!(state.t, 0);
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { eta: 0.0, ..Default::default() },
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { beta2: -0.1, ..Default::default() },
            TrainConfig { eps: 0.0, ..Default::default() },
            TrainConfig { alpha: -1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn lr_candidates_stop_at_minimum() {
        let curve: Vec<LrPoint> = [3.0, 2.0, 1.0, 1.5, 5.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| LrPoint { eta: 10f64.powi(i as i32 - 5), loss: s, smoothed: s })
            .collect();
        assert_eq!(lr_candidates(&curve).len(), 3);
        assert!((suggest_eta(&curve).unwrap() - 1e-4).abs() < 1e-18);
        assert!(suggest_eta(&[]).is_none());
    }
}
