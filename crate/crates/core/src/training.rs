//! Adam on the utterance-level SDR loss: mini-batches, learning-rate halving
//! on dev-loss increase, random restarts of the initialization, and
//! best-dev checkpointing.
//!
//! # Report format
//!
//! [`TrainReport::write_jsonl`] emits JSON lines. The first line has
//! `kind: "restart"` followed by `threshold_db`, `attempts`, `passed`,
//! `chosen_seed`, `attempt_sdr_db`. Each following line is one epoch:
//! `kind: "epoch"`, `epoch`, `train_loss`, `dev_loss`, `learning_rate`,
//! `wall_time_s`. Losses are negative SDR in dB.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::corpus::MixtureExample;
use crate::metrics::{pit_assign, MetricsError};
use crate::model::{FurcaNetModel, ModelConfig, ModelError};
use crate::par::{self, Execution};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("corpus has {found} sources per example, model separates {expected}")]
    SourceCount { expected: usize, found: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .ids()
            .map(|id| Tensor::zeros(params.value(id).shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step_count: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            learning_rate,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter, after which
/// the gradients are cleared.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<(), TrainError> {
    let ids: Vec<_> = params.ids().filter(|&id| params.is_trainable(id)).collect();
    if let Some(&id) = ids.iter().find(|&&id| params.grad(id).is_none()) {
        return Err(TrainError::MissingGradient(params.name(id).to_string()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for id in ids {
        let i = id.index();
        let grad = params.grad(id).expect("checked above").data().to_vec();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let value = params.value_mut(id).data_mut();
        for k in 0..grad.len() {
            let g = grad[k];
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            value[k] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    params.zero_grads();
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub restart_threshold_db: f64,
    pub restart_max_attempts: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.001,
            lr_decay: 0.5,
            batch_size: 8,
            max_epochs: 30,
            restart_threshold_db: -30.0,
            restart_max_attempts: 50,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must lie strictly between 0 and 1");
        }
        if !(self.initial_lr > 0.0) {
            return bad("initial_lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.restart_max_attempts == 0 {
            return bad("restart_max_attempts must be at least 1");
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `decay` whenever the observed dev loss
/// rises above the previous one.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    lr: f64,
    decay: f64,
    previous: Option<f64>,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, decay: f64) -> Self {
        Self {
            lr: initial_lr,
            decay,
            previous: None,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Records an epoch's dev loss; returns whether the rate was decayed.
    pub fn observe(&mut self, dev_loss: f64) -> bool {
        let increased = self.previous.is_some_and(|p| dev_loss > p);
        if increased {
            self.lr *= self.decay;
        }
        self.previous = Some(dev_loss);
        increased
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DevCheck {
    pub passed: bool,
    pub mean_sdr_db: f64,
}

/// Mean best-permutation SDR of `model` on `dev`; passes when it reaches
/// `threshold_db`.
pub fn initial_dev_check(
    model: &FurcaNetModel,
    dev: &[MixtureExample],
    threshold_db: f64,
    exec: Execution,
) -> Result<DevCheck, TrainError> {
    if dev.is_empty() {
        return Err(TrainError::EmptySet("dev"));
    }
    let sdrs = par::map(exec, dev, |ex| -> Result<f64, TrainError> {
        let est = model.separate(&ex.mixture)?;
        Ok(pit_assign(&ex.sources, &est)?.mean_sdr_db)
    });
    let mut total = 0.0;
    for s in sdrs {
        total += s?;
    }
    let mean_sdr_db = total / dev.len() as f64;
    Ok(DevCheck {
        passed: mean_sdr_db >= threshold_db,
        mean_sdr_db,
    })
}

/// Mean training loss of `model` over `set`, without gradients.
pub fn mean_loss(
    model: &FurcaNetModel,
    set: &[MixtureExample],
    exec: Execution,
) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    let losses = par::map(exec, set, |ex| -> Result<f64, TrainError> {
        let mut g = Graph::new();
        let res = model.loss_on_example(&mut g, ex)?;
        Ok(g.value(res.loss).item())
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / set.len() as f64)
}

/// Mean loss over `batch` and the matching mean gradient, one slot per
/// parameter. Per-example work may run in parallel; the reduction runs in
/// batch order.
pub fn batch_gradient(
    model: &FurcaNetModel,
    batch: &[&MixtureExample],
    exec: Execution,
) -> Result<(f64, Vec<Option<Tensor>>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptySet("batch"));
    }
    let per_example = par::map(
        exec,
        batch,
        |ex| -> Result<(f64, Vec<Option<Tensor>>), TrainError> {
            let mut g = Graph::new();
            let res = model.loss_on_example(&mut g, ex)?;
            g.backward(res.loss).map_err(ModelError::from)?;
            Ok((g.value(res.loss).item(), g.param_grads(model.params())))
        },
    );
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Option<Tensor>> = vec![None; model.params().len()];
    for result in per_example {
        let (l, gs) = result?;
        loss += l;
        for (acc, g) in grads.iter_mut().zip(gs) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => a
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(x, y)| *x += y),
                None => *acc = Some(g),
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub threshold_db: f64,
    pub attempts: usize,
    pub passed: bool,
    pub chosen_seed: u64,
    /// Initial mean dev SDR of every attempt, in order.
    pub attempt_sdr_db: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub learning_rate: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub restart: RestartSummary,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_loss: f64,
}

impl TrainReport {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "lowercase")]
        enum Line<'a> {
            Restart(&'a RestartSummary),
            Epoch(&'a EpochRecord),
        }
        let path = path.as_ref();
        let io_err = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        let mut emit = |line: Line| -> Result<(), TrainError> {
            let text = serde_json::to_string(&line).expect("report serializes");
            writeln!(w, "{text}").map_err(io_err)
        };
        emit(Line::Restart(&self.restart))?;
        for e in &self.epochs {
            emit(Line::Epoch(e))?;
        }
        w.flush().map_err(io_err)
    }

    /// The report with wall-clock times zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainReport {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.wall_time_s = 0.0);
        r
    }
}

fn check_sets(
    model: &ModelConfig,
    train: &[MixtureExample],
    dev: &[MixtureExample],
) -> Result<(), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if dev.is_empty() {
        return Err(TrainError::EmptySet("dev"));
    }
    if let Some(ex) = train
        .iter()
        .chain(dev)
        .find(|e| e.sources.len() != model.num_sources)
    {
        return Err(TrainError::SourceCount {
            expected: model.num_sources,
            found: ex.sources.len(),
        });
    }
    Ok(())
}

/// Builds models from seeds `config.seed`, `config.seed + 1`, … until one
/// passes [`initial_dev_check`] or the attempts run out, in which case the
/// best-scoring attempt is kept.
pub fn restart_search(
    config: &ModelConfig,
    dev: &[MixtureExample],
    cfg: &TrainConfig,
) -> Result<(FurcaNetModel, RestartSummary), TrainError> {
    cfg.validate()?;
    let mut best: Option<(f64, u64)> = None;
    let mut attempt_sdr_db = Vec::new();
    for attempt in 0..cfg.restart_max_attempts {
        let seed = config.seed.wrapping_add(attempt as u64);
        let model = FurcaNetModel::build(ModelConfig {
            seed,
            ..config.clone()
        })?;
        let check = initial_dev_check(&model, dev, cfg.restart_threshold_db, cfg.execution)?;
        attempt_sdr_db.push(check.mean_sdr_db);
        log::info!(
            "restart attempt {attempt} (seed {seed}): dev SDR {:.2} dB",
            check.mean_sdr_db
        );
        if check.passed {
            let summary = RestartSummary {
                threshold_db: cfg.restart_threshold_db,
                attempts: attempt + 1,
                passed: true,
                chosen_seed: seed,
                attempt_sdr_db,
            };
            return Ok((model, summary));
        }
        if best.is_none_or(|(s, _)| check.mean_sdr_db > s) {
            best = Some((check.mean_sdr_db, seed));
        }
    }
    let (_, seed) = best.expect("at least one attempt");
    log::warn!(
        "no initialization reached {} dB; keeping seed {seed}",
        cfg.restart_threshold_db
    );
    let model = FurcaNetModel::build(ModelConfig {
        seed,
        ..config.clone()
    })?;
    let summary = RestartSummary {
        threshold_db: cfg.restart_threshold_db,
        attempts: cfg.restart_max_attempts,
        passed: false,
        chosen_seed: seed,
        attempt_sdr_db,
    };
    Ok((model, summary))
}

/// Where and when to persist the best-dev parameters.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPolicy {
    pub best_path: Option<PathBuf>,
}

/// Trains an already initialized model for `cfg.max_epochs` epochs and
/// leaves it holding the best-dev parameters.
pub fn train_epochs(
    model: &mut FurcaNetModel,
    train: &[MixtureExample],
    dev: &[MixtureExample],
    cfg: &TrainConfig,
    checkpoint: &CheckpointPolicy,
) -> Result<(Vec<EpochRecord>, Option<usize>, f64), TrainError> {
    cfg.validate()?;
    check_sets(model.config(), train, dev)?;
    let mut adam = AdamState::new(model.params(), cfg.initial_lr);
    let mut schedule = LrSchedule::new(cfg.initial_lr, cfg.lr_decay);
    let mut records = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        adam.learning_rate = schedule.learning_rate();
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&MixtureExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradient(model, &batch, cfg.execution)?;
            loss_sum += loss * batch.len() as f64;
            let params = model.params_mut();
            let ids: Vec<_> = params.ids().collect();
            for (id, g) in ids.into_iter().zip(grads) {
                if let Some(g) = g {
                    params.set_grad(id, g).map_err(ModelError::from)?;
                }
            }
            adam_step(params, &mut adam)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let dev_loss = mean_loss(model, dev, cfg.execution)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            learning_rate: schedule.learning_rate(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.3} dB, dev {dev_loss:.3} dB, lr {:.2e}, {:.1} s",
            record.learning_rate,
            record.wall_time_s
        );
        records.push(record);
        schedule.observe(dev_loss);
        if best.as_ref().is_none_or(|(_, b, _)| dev_loss < *b) {
            best = Some((epoch, dev_loss, model.params().flat_values()));
            if let Some(path) = &checkpoint.best_path {
                model.save(path)?;
            }
        }
    }
    match best {
        Some((epoch, loss, values)) => {
            model
                .params_mut()
                .load_flat_values(&values)
                .map_err(ModelError::from)?;
            Ok((records, Some(epoch), loss))
        }
        None => Ok((records, None, f64::INFINITY)),
    }
}

/// The full recipe: restart search, then epoch training with best-dev
/// checkpointing. The returned model holds the best-dev parameters.
pub fn train(
    config: &ModelConfig,
    train_set: &[MixtureExample],
    dev_set: &[MixtureExample],
    cfg: &TrainConfig,
    checkpoint: &CheckpointPolicy,
) -> Result<(FurcaNetModel, TrainReport), TrainError> {
    cfg.validate()?;
    config.validate()?;
    check_sets(config, train_set, dev_set)?;
    let (mut model, restart) = restart_search(config, dev_set, cfg)?;
    let (epochs, best_epoch, best_dev_loss) =
        train_epochs(&mut model, train_set, dev_set, cfg, checkpoint)?;
    let report = TrainReport {
        restart,
        epochs,
        best_epoch,
        best_dev_loss,
    };
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub initial_dev_sdr_db: f64,
    pub passes_threshold: bool,
    /// Dev loss after each epoch.
    pub dev_losses: Vec<f64>,
}

/// Trains one model per initialization seed, without restarts, to expose
/// how strongly the outcome depends on the starting point.
pub fn seed_sweep(
    config: &ModelConfig,
    train_set: &[MixtureExample],
    dev_set: &[MixtureExample],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<SeedOutcome>, TrainError> {
    seeds
        .iter()
        .map(|&seed| {
            let mut model = FurcaNetModel::build(ModelConfig {
                seed,
                ..config.clone()
            })?;
            let check =
                initial_dev_check(&model, dev_set, cfg.restart_threshold_db, cfg.execution)?;
            let (epochs, _, _) = train_epochs(
                &mut model,
                train_set,
                dev_set,
                cfg,
                &CheckpointPolicy::default(),
            )?;
            Ok(SeedOutcome {
                seed,
                initial_dev_sdr_db: check.mean_sdr_db,
                passes_threshold: check.passed,
                dev_losses: epochs.iter().map(|e| e.dev_loss).collect(),
            })
        })
        .collect()
}
