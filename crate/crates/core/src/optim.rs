//! Adam and the training loop.
//!
//! Training initialises the networks, normalises inputs and outputs with
//! statistics of the training record, then runs epochs of shuffled
//! mini-batches of sections. After every epoch the validation metric is
//! evaluated and the best model so far is kept; training stops at the
//! epoch limit, when the validation metric has not improved for
//! `patience` epochs, or when the wall-clock budget is used up.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::nrms;
use crate::data::IoDataset;
use crate::error::{Error, Result};
use crate::loss::{encoder_loss, section_loss_grad, valid_starts, BatchSampler, IndexSet, InitialStates};
use crate::model::{block_name, save_model, ModelConfig, Normalization, SimulationMode, StateInit, SubnetModel, BLOCK_COUNT, BLOCK_STATES};
use crate::scalar::Scalar;

/// Per-channel mean and population standard deviation of the training
/// record.
pub fn fit_normalization<S: Scalar>(train: &IoDataset<S>) -> Result<Normalization> {
    Normalization::fit(train)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment buffer pair per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub config: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            step: 0,
            config,
            m: vec![Vec::new(); BLOCK_COUNT],
            v: vec![Vec::new(); BLOCK_COUNT],
        }
    }

    /// Updates `blocks` (id, values) in place with `grads[id]`. A non-finite
    /// gradient aborts the step before any value changes.
    pub fn step(&mut self, blocks: Vec<(usize, &mut [S])>, grads: &[Vec<S>]) -> Result<()> {
        for (id, vals) in &blocks {
            let g = grads.get(*id).ok_or_else(|| Error::contract(format!("no gradient for block {id}")))?;
            if g.len() != vals.len() {
                return Err(Error::contract(format!(
                    "gradient of block `{}` has {} entries, parameters {}",
                    block_name(*id),
                    g.len(),
                    vals.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    block: block_name(*id).to_string(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::one() - S::of(c.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let bc2 = S::one() - S::of(c.beta2.powi(self.step.min(i32::MAX as u64) as i32));
        let (lr, eps) = (S::of(c.learning_rate), S::of(c.epsilon));
        for (id, vals) in blocks {
            let g = &grads[id];
            if self.m[id].len() != vals.len() {
                self.m[id] = vec![S::zero(); vals.len()];
                self.v[id] = vec![S::zero(); vals.len()];
            }
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for i in 0..vals.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                vals[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`] for a single parameter vector.
pub fn adam_step<S: Scalar>(state: &mut AdamState<S>, params: &mut [S], grads: &[S]) -> Result<()> {
    let mut g = vec![Vec::new(); BLOCK_COUNT];
    g[0] = grads.to_vec();
    state.step(vec![(0, params)], &g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationMetric {
    /// Free-run simulation NRMS on the validation record.
    #[default]
    SimulationNrms,
    /// Encoder loss over all sections of the validation record.
    EncoderLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Truncation length `T`; `None` uses the whole training record as a
    /// single section.
    pub horizon: Option<usize>,
    pub batch_size: usize,
    /// Spacing `d` between section starts.
    pub spacing: usize,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    /// Stop when the best epoch is more than this many epochs ago.
    pub patience: Option<usize>,
    pub validation: ValidationMetric,
    /// Wall-clock budget in seconds, checked before every epoch.
    pub time_budget_s: Option<f64>,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            horizon: Some(40),
            batch_size: 256,
            spacing: 1,
            adam: AdamConfig::default(),
            max_epochs: 1_000,
            patience: Some(50),
            validation: ValidationMetric::SimulationNrms,
            time_budget_s: None,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon == Some(0) {
            return bad("horizon must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.spacing == 0 {
            return bad("spacing must be at least 1");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        let a = self.adam;
        if !(a.learning_rate > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return bad("adam: need learning_rate > 0, 0 <= beta < 1, epsilon > 0");
        }
        if let Some(b) = self.time_budget_s {
            if !(b >= 0.0) {
                return bad("time_budget_s must be non-negative");
            }
        }
        if self.validation == ValidationMetric::EncoderLoss && self.model.state_init == StateInit::Zero {
            return bad("encoder-loss validation needs a model with an encoder");
        }
        Ok(())
    }

    fn horizon_for(&self, n: usize) -> usize {
        self.horizon.unwrap_or(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean section loss over the epoch's batches (normalised units).
    pub train_loss: f64,
    pub val_metric: f64,
    /// Seconds since the start of training at the end of the epoch.
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TimeBudget,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_metric: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub stop_reason: StopReason,
    pub validation: ValidationMetric,
}

impl TrainReport {
    /// `epoch,train_loss,val_metric`. Wall-clock times are kept out of this
    /// file so that identical runs produce identical bytes; see
    /// [`TrainReport::write_timing_csv`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.write_rows(path, "epoch,train_loss,val_metric", |r| format!("{},{},{}", r.epoch, r.train_loss, r.val_metric))
    }

    /// `epoch,wallclock_s`.
    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        self.write_rows(path, "epoch,wallclock_s", |r| format!("{},{}", r.epoch, r.wallclock_s))
    }

    fn write_rows(&self, path: &Path, header: &str, row: impl Fn(&EpochRecord) -> String) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{header}").map_err(io)?;
        for r in &self.epochs {
            writeln!(w, "{}", row(r)).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Result of a training run that may have stopped on a numeric failure.
#[derive(Debug)]
pub struct TrainOutcome<S> {
    /// Best model over recorded epochs, or the initial model if none.
    pub model: SubnetModel<S>,
    pub report: TrainReport,
    /// Set when training was aborted by divergence.
    pub error: Option<Error>,
}

/// Per-epoch callback: the epoch record and the best model so far.
pub type EpochObserver<'a, S> = &'a mut dyn FnMut(&EpochRecord, &SubnetModel<S>);

/// Optional side effects of a run.
#[derive(Default)]
pub struct TrainHooks<'a, S> {
    /// Saved whenever the validation metric improves.
    pub checkpoint: Option<PathBuf>,
    /// Called after every epoch with the record and the best model so far.
    pub observer: Option<EpochObserver<'a, S>>,
}

/// Trains a model; divergence is returned as an error after the best
/// checkpoint (if any) has been written.
pub fn train<S: Scalar>(config: &TrainConfig, train: &IoDataset<S>, val: &IoDataset<S>) -> Result<(SubnetModel<S>, TrainReport)> {
    let out = train_with(config, train, val, TrainHooks::default())?;
    match out.error {
        Some(e) => Err(e),
        None => Ok((out.model, out.report)),
    }
}

/// Full-control variant of [`train`]. Configuration and data errors are
/// returned as `Err`; numeric failures during training end the run and are
/// reported in [`TrainOutcome::error`] alongside the best model.
pub fn train_with<S: Scalar>(
    config: &TrainConfig,
    train: &IoDataset<S>,
    val: &IoDataset<S>,
    mut hooks: TrainHooks<'_, S>,
) -> Result<TrainOutcome<S>> {
    let clock = Instant::now();
    config.validate()?;
    if train.n_u() != val.n_u() || train.n_y() != val.n_y() {
        return Err(Error::Config(format!(
            "training record has {}/{} channels, validation {}/{}",
            train.n_u(),
            train.n_y(),
            val.n_u(),
            val.n_y()
        )));
    }
    let normalization = fit_normalization(train)?;
    let mut model = SubnetModel::<S>::init(&config.model, normalization, config.seed)?;
    let train_n = model.normalization.normalize(train);
    let val_n = model.normalization.normalize(val);

    let horizon = config.horizon_for(train.len());
    let lag = match config.model.state_init {
        StateInit::Encoder => model.lag(),
        StateInit::Zero => 0,
    };
    let index: IndexSet = valid_starts(train.len(), horizon, lag, 0, config.spacing)?;
    let val_lag = model.lag();
    if val.len() <= val_lag + 1 {
        return Err(Error::Config(format!("validation record of {} samples is shorter than the lag", val.len())));
    }
    let val_horizon = horizon.min(val.len() - val_lag);
    let val_starts = match config.validation {
        ValidationMetric::EncoderLoss => valid_starts(val.len(), val_horizon, val_lag, 0, 1)?.starts,
        ValidationMetric::SimulationNrms => Vec::new(),
    };
    let mut states = (config.model.state_init == StateInit::Zero).then(|| InitialStates::<S>::zeros(&index, model.n_x));
    let sampler = BatchSampler::new(&index, config.batch_size, config.seed)?;
    let mut adam = AdamState::<S>::new(config.adam);

    let mut best = model.clone();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_metric: None,
        checkpoint: None,
        stop_reason: StopReason::MaxEpochs,
        validation: config.validation,
    };
    let mut error = None;

    let validate = |m: &SubnetModel<S>| -> Result<f64> {
        match config.validation {
            ValidationMetric::SimulationNrms => {
                let sim = m.simulate(val, SimulationMode::FreeRun)?;
                nrms(&val.y, &sim.y_hat, sim.skip)
            }
            ValidationMetric::EncoderLoss => Ok(encoder_loss(m, &val_n, &val_starts, val_horizon)?.to_f64_lossless()),
        }
    };

    for epoch in 0..config.max_epochs {
        if let Some(budget) = config.time_budget_s {
            if clock.elapsed().as_secs_f64() >= budget {
                report.stop_reason = StopReason::TimeBudget;
                break;
            }
        }
        let mut loss_sum = 0.0;
        let mut failed = None;
        for batch in sampler.epoch(epoch as u64) {
            let lg = match section_loss_grad(&model, &train_n, &batch, horizon, states.as_ref(), config.threads) {
                Ok(lg) => lg,
                Err(e) if e.is_numeric() => {
                    failed = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            };
            loss_sum += lg.loss.to_f64_lossless() * batch.len() as f64;
            let mut blocks = model.param_blocks_mut();
            if let Some(st) = states.as_mut() {
                blocks.push((BLOCK_STATES, st.values.as_mut_slice()));
            }
            if let Err(e) = adam.step(blocks, &lg.grads) {
                failed = Some(e);
                break;
            }
        }
        if failed.is_none() {
            match validate(&model) {
                Ok(v) if v.is_finite() => {
                    let record = EpochRecord {
                        epoch,
                        train_loss: loss_sum / index.len() as f64,
                        val_metric: v,
                        wallclock_s: clock.elapsed().as_secs_f64(),
                    };
                    if report.best_val_metric.is_none_or(|b| v < b) {
                        report.best_val_metric = Some(v);
                        report.best_epoch = Some(epoch);
                        best = model.clone();
                        if let Some(path) = &hooks.checkpoint {
                            save_model(&best, path)?;
                            report.checkpoint = Some(path.clone());
                        }
                    }
                    log::info!(
                        "epoch {epoch}: train loss {:.6e}, validation {:.6e}, {:.1}s",
                        record.train_loss,
                        v,
                        record.wallclock_s
                    );
                    report.epochs.push(record);
                    if let Some(obs) = hooks.observer.as_mut() {
                        obs(report.epochs.last().expect("just pushed"), &best);
                    }
                }
                Ok(_) => failed = Some(Error::divergence("validation", epoch)),
                Err(e) if e.is_numeric() => failed = Some(e),
                Err(e) => return Err(e),
            }
        }
        if let Some(e) = failed {
            log::warn!("training stopped in epoch {epoch}: {e}");
            report.stop_reason = StopReason::Diverged;
            error = Some(e);
            break;
        }
        if let (Some(p), Some(b)) = (config.patience, report.best_epoch) {
            if epoch - b > p {
                report.stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    if report.best_epoch.is_none() {
        if let Some(path) = &hooks.checkpoint {
            if error.is_none() {
                save_model(&best, path)?;
                report.checkpoint = Some(path.clone());
            }
        }
    }
    Ok(TrainOutcome { model: best, report, error })
}
