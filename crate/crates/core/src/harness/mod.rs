//! Downstream training with a frozen backbone, evaluation, and the
//! experiment protocols built on it.

mod protocol;

use std::time::Instant;

use indexmap::IndexMap;
use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{params_digest, Backbone};
use crate::error::{Error, Result};
use crate::prompts::{PromptTable, Strategy, StrategyConfig};
use crate::tensor::init;
use crate::tensor::{add_summed_grads, argmax, Adam, AdamConfig, GradMap, Graph, Parameter, Targets, Tensor};
use crate::text::{stratified_holdout, Dataset, LabeledInstance, TaskSpec};

pub use protocol::{
    few_shot_protocol, mean_sd, multi_seed_report, param_ratio_report, parse_sweep_values, sweep, CvRecord,
    FewShotResult, GridPoint, ParamRow, SeedReport, SeedRow, SweepAxis, SweepRow, SweepTable, SweepValue,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Examples per micro-batch.
    pub batch_size: usize,
    /// `0` evaluates without updating anything.
    pub lr: f64,
    /// Micro-batches per optimizer update.
    pub grad_accum_steps: usize,
    pub warmup_steps: u64,
    pub max_epochs: usize,
    /// Optional cap on optimizer updates across all epochs.
    pub max_steps: Option<u64>,
    /// Epochs without dev improvement before stopping; `None` never stops early.
    pub early_stop_patience: Option<usize>,
    /// Train the backbone as well (full fine-tuning).
    pub fine_tune: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 5e-3,
            grad_accum_steps: 2,
            warmup_steps: 200,
            max_epochs: 30,
            max_steps: None,
            early_stop_patience: Some(5),
            fine_tune: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch size, rate, accumulation and warmup of the original full-scale
    /// setup.
    pub fn full_scale_defaults() -> Self {
        Self {
            lr: 1e-5,
            warmup_steps: 2000,
            max_epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size, grad_accum_steps and max_epochs must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::config("early_stop_patience must be positive"));
        }
        Ok(())
    }
}

/// Train, dev and test instances of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<LabeledInstance>,
    pub dev: Vec<LabeledInstance>,
    pub test: Vec<LabeledInstance>,
}

impl TaskData {
    /// Stratified split of a dataset into train, dev and test.
    pub fn split(ds: &Dataset, dev_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let labels = ds.labels();
        let (rest, test) = stratified_holdout(&labels, test_frac, init::derive_seed(seed, "test-split"))?;
        let rest_labels: Vec<usize> = rest.iter().map(|&i| labels[i]).collect();
        let frac = dev_frac / (1.0 - test_frac);
        let (train, dev) = stratified_holdout(&rest_labels, frac, init::derive_seed(seed, "dev-split"))?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| rest[i]).collect::<Vec<_>>();
        Ok(Self {
            spec: ds.spec.clone(),
            train: ds.subset(&pick(&train)),
            dev: ds.subset(&pick(&dev)),
            test: ds.subset(&test),
        })
    }

    fn all(&self) -> impl Iterator<Item = &LabeledInstance> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

/// Content hashes of every frozen parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenSnapshot {
    pub digests: IndexMap<String, String>,
}

impl FrozenSnapshot {
    pub fn take<'p>(params: impl IntoIterator<Item = &'p Parameter>) -> Self {
        Self {
            digests: params
                .into_iter()
                .filter(|p| p.is_frozen())
                .map(|p| (p.name.clone(), params_digest([p])))
                .collect(),
        }
    }

    /// Fails with the names of frozen parameters whose contents changed.
    pub fn verify<'p>(&self, params: impl IntoIterator<Item = &'p Parameter>) -> Result<()> {
        let now: IndexMap<&str, &Parameter> = params.into_iter().map(|p| (p.name.as_str(), p)).collect();
        let drifted: Vec<String> = self
            .digests
            .iter()
            .filter(|(name, digest)| now.get(name.as_str()).map(|p| params_digest([*p])) != Some((*digest).clone()))
            .map(|(name, _)| name.clone())
            .collect();
        if drifted.is_empty() {
            Ok(())
        } else {
            Err(Error::FrozenDrift(drifted))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer updates so far.
    pub step: u64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: String,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// Mean loss of every optimizer update.
    pub step_losses: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub best_dev_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub trainable_params: usize,
    /// Parameters updated by full fine-tuning of the same model.
    pub finetune_params: usize,
    pub param_ratio: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

fn example_loss<'a>(
    g: &Graph<'a>,
    backbone: &'a Backbone,
    strategy: &'a Strategy,
    inst: &LabeledInstance,
    verbalizer: &[usize],
    dropout_seed: Option<u64>,
) -> Result<(crate::tensor::Var, crate::tensor::Var)> {
    let logits = strategy.logits(g, backbone, inst, verbalizer, dropout_seed)?;
    let loss = g.cross_entropy(logits, &Targets::Index(vec![inst.label_id]))?;
    Ok((logits, loss))
}

/// Accuracy, mean loss and argmax predictions (ties to the lower label).
pub fn evaluate(
    backbone: &Backbone,
    strategy: &Strategy,
    instances: &[LabeledInstance],
    verbalizer: &[usize],
) -> Result<Evaluation> {
    if instances.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let rows: Vec<(usize, f64)> = instances
        .par_iter()
        .map(|inst| {
            let g = Graph::new();
            let (logits, loss) = example_loss(&g, backbone, strategy, inst, verbalizer, None)?;
            Ok((argmax(&g.value(logits)), g.scalar(loss)))
        })
        .collect::<Result<_>>()?;
    let hits = rows.iter().zip(instances).filter(|(r, i)| r.0 == i.label_id).count();
    Ok(Evaluation {
        accuracy: hits as f64 / instances.len() as f64,
        loss: rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64,
        predictions: rows.into_iter().map(|r| r.0).collect(),
    })
}

fn trainable_values(backbone: &Backbone, strategy: &Strategy) -> Vec<(String, Tensor)> {
    backbone
        .params()
        .into_iter()
        .chain(strategy.params())
        .filter(|p| !p.is_frozen())
        .map(|p| (p.name.clone(), p.tensor.clone()))
        .collect()
}

fn restore(backbone: &mut Backbone, strategy: &mut Strategy, saved: &[(String, Tensor)]) {
    let by_name: IndexMap<&str, &Tensor> = saved.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for p in backbone.params_mut().into_iter().chain(strategy.params_mut()) {
        if let Some(t) = by_name.get(p.name.as_str()) {
            p.tensor.data_mut().copy_from_slice(t.data());
        }
    }
}

/// Tunes the strategy's trainable parameters (and the backbone's, if it is
/// not frozen) with early stopping on dev accuracy, dev loss breaking ties.
/// The best epoch's parameters are restored before testing, and every frozen
/// parameter is checked against its pre-training hash.
pub fn train_downstream(
    backbone: &mut Backbone,
    strategy: &mut Strategy,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::invalid("training needs non-empty train and dev sets"));
    }
    let started = Instant::now();
    let verbalizer = data.spec.label_token_ids(&backbone.vocab)?;
    let max_len = data.all().map(|i| i.token_ids.len()).max().unwrap_or(0);
    strategy.check_fits(backbone, max_len)?;

    let snapshot = FrozenSnapshot::take(backbone.params().into_iter().chain(strategy.params()));
    let backbone_trainable: usize = backbone.params().iter().filter(|p| !p.is_frozen()).map(|p| p.numel()).sum();
    let trainable_params = backbone_trainable + strategy.trainable_count();
    let finetune_params = backbone.num_params() + strategy.trainable_count();

    let mut adam = if cfg.lr > 0.0 {
        Some(Adam::new(AdamConfig::new(cfg.lr, cfg.warmup_steps))?)
    } else {
        None
    };
    let use_dropout = backbone.config.dropout > 0.0;
    let mut rng = init::rng(init::derive_seed(cfg.seed, "train-order"));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step: u64 = 0;
    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, f64, usize, Vec<(String, Tensor)>)> = None;
    let mut since_best = 0;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let window = cfg.batch_size * cfg.grad_accum_steps;
        let mut epoch_loss = (0.0, 0usize);
        for update in order.chunks(window) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let scale = 1.0 / update.len() as f64;
            let mut window_loss = 0.0;
            for micro in update.chunks(cfg.batch_size) {
                let (bb, st) = (&*backbone, &*strategy);
                let results: Vec<(f64, GradMap)> = micro
                    .par_iter()
                    .map(|&i| {
                        let g = Graph::new();
                        let seed = use_dropout.then(|| init::derive_seed(cfg.seed ^ (step << 24) ^ i as u64, "dropout"));
                        let (_, loss) = example_loss(&g, bb, st, &data.train[i], &verbalizer, seed)?;
                        Ok((g.scalar(loss), g.backward(loss)?.by_param()))
                    })
                    .collect::<Result<_>>()?;
                window_loss += results.iter().map(|r| r.0).sum::<f64>();
                let grads: Vec<GradMap> = results.into_iter().map(|r| r.1).collect();
                if adam.is_some() {
                    add_summed_grads(backbone.params_mut().into_iter().chain(strategy.params_mut()), &grads, scale);
                }
            }
            if let Some(adam) = adam.as_mut() {
                adam.step(backbone.params_mut().into_iter().chain(strategy.params_mut()));
                for p in backbone.params_mut().into_iter().chain(strategy.params_mut()) {
                    p.tensor.zero_grad();
                }
            }
            step += 1;
            step_losses.push(window_loss * scale);
            epoch_loss = (epoch_loss.0 + window_loss, epoch_loss.1 + update.len());
            debug!("step {step} loss {:.5}", window_loss * scale);
        }
        let dev = evaluate(backbone, strategy, &data.dev, &verbalizer)?;
        let train_loss = epoch_loss.0 / epoch_loss.1.max(1) as f64;
        debug!("epoch {epoch} train loss {train_loss:.5} dev acc {:.4} dev loss {:.5}", dev.accuracy, dev.loss);
        epochs.push(EpochMetrics {
            epoch,
            step,
            train_loss,
            dev_loss: dev.loss,
            dev_accuracy: dev.accuracy,
        });
        let improved = match &best {
            None => true,
            Some((acc, loss, ..)) => dev.accuracy > *acc || (dev.accuracy == *acc && dev.loss < *loss),
        };
        if improved {
            best = Some((dev.accuracy, dev.loss, epoch, trainable_values(backbone, strategy)));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }

    let (best_dev_accuracy, best_dev_loss, best_epoch) = match &best {
        Some((acc, loss, epoch, saved)) => {
            restore(backbone, strategy, saved);
            (*acc, *loss, *epoch)
        }
        None => {
            // the step cap was reached before the first epoch finished
            let dev = evaluate(backbone, strategy, &data.dev, &verbalizer)?;
            (dev.accuracy, dev.loss, 0)
        }
    };
    for p in backbone.params_mut().into_iter().chain(strategy.params_mut()) {
        p.tensor.clear_grad();
    }
    snapshot.verify(backbone.params().into_iter().chain(strategy.params()))?;

    let train_accuracy = evaluate(backbone, strategy, &data.train, &verbalizer)?.accuracy;
    let test_accuracy = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(backbone, strategy, &data.test, &verbalizer)?.accuracy)
    };
    info!(
        "{}: {} steps, best epoch {best_epoch}, dev {best_dev_accuracy:.4}, test {}",
        strategy.name(),
        step,
        test_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"))
    );
    Ok(RunResult {
        strategy: strategy.name(),
        seed: cfg.seed,
        epochs,
        step_losses,
        best_epoch,
        best_dev_accuracy,
        best_dev_loss,
        train_accuracy,
        test_accuracy,
        trainable_params,
        finetune_params,
        param_ratio: trainable_params as f64 / finetune_params as f64,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// A strategy configuration bound to a backbone, ready to be run on a task
/// under different seeds.
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub backbone: &'a Backbone,
    pub strategy: StrategyConfig,
    pub table: Option<PromptTable>,
    pub train: TrainConfig,
}

impl Experiment<'_> {
    /// Builds the strategy for `seed`, which also catches configurations
    /// that do not fit the backbone.
    pub fn build(&self, seed: u64) -> Result<(Backbone, Strategy)> {
        let mut bb = self.backbone.clone();
        bb.set_frozen(!self.train.fine_tune);
        let strategy = Strategy::new(self.strategy.clone(), &bb, seed, self.table.clone())?;
        Ok((bb, strategy))
    }

    /// Trains a private copy of the backbone and a fresh strategy.
    pub fn run(&self, data: &TaskData, seed: u64) -> Result<RunResult> {
        self.train.validate()?;
        let (mut bb, mut strategy) = self.build(seed)?;
        let cfg = TrainConfig {
            seed,
            ..self.train.clone()
        };
        train_downstream(&mut bb, &mut strategy, data, &cfg)
    }
}
