//! Training loop: augment → forward → loss → backward → Nadam, with a dev
//! evaluation per epoch feeding the Newbob schedule.
//!
//! All randomness is derived from `(seed, step)` or `(seed, epoch)`, so a run
//! restored from a checkpoint continues exactly as the uninterrupted run.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::spec_augment;
use crate::config::RunConfig;
use crate::corpus::{make_batches, Batch, Utterance};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::heads::{frame_stats, FrameStats};
use crate::model::{AcousticModel, ModelInput};
use crate::optim::{lr_at, warmup_steps, Nadam, Newbob};
use crate::params::{ParamId, ParamStore};
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything besides the parameter values needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S> {
    pub epoch: u64,
    pub optimizer: Nadam<S>,
    pub newbob: Newbob,
    /// Fixed from the first epoch's batch count.
    pub steps_per_epoch: Option<u64>,
}

impl<S: Scalar> TrainState<S> {
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub step: u64,
    pub train_ce: f64,
    pub dev_ce: f64,
    pub frame_error_rate: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl EpochMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialise")
    }
}

pub struct Trainer<S: Scalar> {
    pub config: RunConfig,
    pub model: AcousticModel,
    pub store: ParamStore<S>,
    pub state: TrainState<S>,
    decayed: Vec<ParamId>,
}

impl<S: Scalar> Trainer<S> {
    /// Freshly initialised model and optimizer.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.run.seed);
        let model = AcousticModel::declare(&mut store, &config.model_config())?;
        let state = TrainState {
            epoch: 0,
            optimizer: Nadam::new(&store),
            newbob: Newbob::default(),
            steps_per_epoch: None,
        };
        Ok(Self::assemble(config.clone(), model, store, state))
    }

    pub(crate) fn assemble(config: RunConfig, model: AcousticModel, store: ParamStore<S>, state: TrainState<S>) -> Self {
        let decayed = model.weight_decay_params();
        Self {
            config,
            model,
            store,
            state,
            decayed,
        }
    }

    /// Names of the parameters that receive weight decay.
    pub fn weight_decay_names(&self) -> Vec<&str> {
        self.decayed.iter().map(|&id| self.store.name(id)).collect()
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(
            self.state.step(),
            self.state.steps_per_epoch.unwrap_or(1),
            &self.config.optim,
            &self.state.newbob,
        )
    }

    fn batches<'c>(&self, corpus: &'c [Utterance]) -> Result<Vec<Batch<'c>>> {
        let seed = stream(self.config.run.seed, Domain::Batching, self.state.epoch).random::<u64>();
        make_batches(corpus, self.config.optim.frame_budget, seed)
    }

    /// One optimisation step on `batch`; returns final-head frame statistics
    /// measured in training mode.
    pub fn train_step(&mut self, batch: &Batch<'_>) -> Result<FrameStats> {
        let step = self.state.step();
        let seed = self.config.run.seed;
        let batch = if self.config.augment.enabled {
            let mut rng = stream(seed, Domain::Augment, step);
            let feats = batch
                .utterances
                .iter()
                .map(|u| spec_augment(&u.features, &self.config.augment, &mut rng))
                .collect::<Result<Vec<Tensor<f64>>>>()?;
            batch.with_features(&feats)?
        } else {
            batch.clone()
        };
        let input = ModelInput::<S>::from_batch(&batch);
        let mut g = Graph::training(stream(seed, Domain::Dropout, step));
        let out = self.model.loss(&mut g, &self.store, &input)?;
        g.value(out.total).assert_finite("training loss")?;
        let stats = frame_stats(g.value(out.output.final_logits), &input.targets, &input.valid);
        let grads = g.backward(out.total)?;
        self.store.zero_grads();
        self.store.accumulate(&g, &grads);
        let lr = self.current_lr();
        self.state
            .optimizer
            .update(&mut self.store, lr, &self.config.optim, &self.decayed)?;
        Ok(stats)
    }

    /// Final-head cross-entropy and frame accuracy in evaluation mode.
    pub fn evaluate(&self, corpus: &[Utterance]) -> Result<FrameStats> {
        evaluate(&self.model, &self.store, corpus, self.config.optim.frame_budget)
    }

    pub fn run_epoch(&mut self, train: &[Utterance], dev: &[Utterance]) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::EmptyInput("training corpus"));
        }
        let start = Instant::now();
        let batches = self.batches(train)?;
        let spe = *self
            .state
            .steps_per_epoch
            .get_or_insert(batches.len() as u64);
        let mut train_stats = FrameStats::default();
        let mut last_lr = self.current_lr();
        for batch in &batches {
            last_lr = self.current_lr();
            train_stats.merge(self.train_step(batch)?);
        }
        let dev_stats = self.evaluate(if dev.is_empty() { train } else { dev })?;
        let after_warmup = self.state.step() as f64 >= warmup_steps(spe, &self.config.optim);
        self.state
            .newbob
            .record(dev_stats.ce(), &self.config.optim, after_warmup);
        self.state.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.state.epoch,
            step: self.state.step(),
            train_ce: train_stats.ce(),
            dev_ce: dev_stats.ce(),
            frame_error_rate: dev_stats.frame_error_rate(),
            lr: last_lr,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }
}

pub fn evaluate<S: Scalar>(
    model: &AcousticModel,
    store: &ParamStore<S>,
    corpus: &[Utterance],
    frame_budget: usize,
) -> Result<FrameStats> {
    let mut stats = FrameStats::default();
    for batch in make_batches(corpus, frame_budget, 0)? {
        let input = ModelInput::<S>::from_batch(&batch);
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &input)?;
        stats.merge(frame_stats(g.value(out.final_logits), &input.targets, &input.valid));
    }
    Ok(stats)
}
