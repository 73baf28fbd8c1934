//! Masked-token pretraining of the backbone.

use log::{debug, info};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Backbone, PromptVars};
use crate::error::{Error, Result};
use crate::tensor::init::{self, SeedRng};
use crate::tensor::{argmax, set_summed_grads, Adam, AdamConfig, GradMap, Graph, Targets};
use crate::text::vocab::MASK;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct MlmConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            mask_rate: 0.15,
            lr: 1e-3,
            warmup_steps: 100,
            seed: 0,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::config(format!("mask_rate {} outside (0, 1)", self.mask_rate)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    /// Mean masked-token loss of each step's batch.
    pub losses: Vec<f64>,
}

/// A sentence with some positions replaced by `[MASK]`.
struct Masked {
    input: Vec<usize>,
    positions: Vec<usize>,
    targets: Vec<usize>,
}

/// Masks each position with probability `rate`, and at least one position.
fn mask_sentence(ids: &[usize], rate: f64, rng: &mut SeedRng) -> Masked {
    let mut positions: Vec<usize> = (0..ids.len()).filter(|_| rng.gen::<f64>() < rate).collect();
    if positions.is_empty() {
        positions.push(rng.gen_range(0..ids.len()));
    }
    let mut input = ids.to_vec();
    let targets = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        input[p] = MASK;
    }
    Masked {
        input,
        positions,
        targets,
    }
}

fn encode_corpus(model: &Backbone, corpus: &[String]) -> Result<Vec<Vec<usize>>> {
    let ids: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| {
            let mut ids = model.vocab.encode(s);
            ids.truncate(model.config.max_context);
            ids
        })
        .filter(|ids| !ids.is_empty())
        .collect();
    if ids.is_empty() {
        return Err(Error::data("pretraining corpus has no tokens"));
    }
    Ok(ids)
}

fn masked_loss(model: &Backbone, m: &Masked) -> Result<(f64, GradMap)> {
    let g = Graph::new();
    let v = model.bind(&g);
    let hidden = model.encode(&g, &v, &m.input, &PromptVars::default(), None)?;
    let rows = g.gather(hidden, &m.positions);
    let logits = model.vocab_logits(&g, &v, rows);
    let loss = g.cross_entropy(logits, &Targets::Index(m.targets.clone()))?;
    let value = g.scalar(loss);
    Ok((value, g.backward(loss)?.by_param()))
}

/// Trains every non-frozen backbone parameter on masked-token prediction.
/// Batches are drawn with replacement from `corpus`.
pub fn mlm_pretrain(model: &mut Backbone, corpus: &[String], cfg: &MlmConfig) -> Result<MlmReport> {
    cfg.validate()?;
    let ids = encode_corpus(model, corpus)?;
    let mut report = MlmReport { losses: Vec::new() };
    if cfg.steps == 0 {
        return Ok(report);
    }
    let mut rng = init::rng(init::derive_seed(cfg.seed, "mlm-pretrain"));
    let mut adam = Adam::new(AdamConfig::new(cfg.lr, cfg.warmup_steps))?;
    for step in 0..cfg.steps {
        let batch: Vec<Masked> = (0..cfg.batch_size)
            .map(|_| {
                let s = &ids[rng.gen_range(0..ids.len())];
                mask_sentence(s, cfg.mask_rate, &mut rng)
            })
            .collect();
        let model_ref = &*model;
        let results: Vec<(f64, GradMap)> = batch
            .par_iter()
            .map(|m| masked_loss(model_ref, m))
            .collect::<Result<_>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / batch.len() as f64;
        let grads: Vec<GradMap> = results.into_iter().map(|r| r.1).collect();
        set_summed_grads(model.params_mut(), &grads, 1.0 / batch.len() as f64);
        adam.step(model.params_mut());
        model.step += 1;
        report.losses.push(loss);
        if (step + 1) % 100 == 0 {
            debug!("mlm step {} loss {loss:.4}", step + 1);
        }
    }
    info!(
        "mlm pretraining: {} steps, loss {:.4} -> {:.4}",
        cfg.steps,
        report.losses[0],
        report.losses[report.losses.len() - 1]
    );
    Ok(report)
}

/// Fraction of masked positions whose argmax prediction is the original
/// token. Masks are drawn as in pretraining from `seed`.
pub fn masked_accuracy(model: &Backbone, sentences: &[String], mask_rate: f64, seed: u64) -> Result<f64> {
    let ids = encode_corpus(model, sentences)?;
    let mut rng = init::rng(init::derive_seed(seed, "mlm-eval"));
    let masked: Vec<Masked> = ids.iter().map(|s| mask_sentence(s, mask_rate, &mut rng)).collect();
    let counts: Vec<(usize, usize)> = masked
        .par_iter()
        .map(|m| {
            let g = Graph::new();
            let v = model.bind(&g);
            let hidden = model.encode(&g, &v, &m.input, &PromptVars::default(), None)?;
            let logits = g.tensor(model.vocab_logits(&g, &v, g.gather(hidden, &m.positions)));
            let hits = m
                .targets
                .iter()
                .enumerate()
                .filter(|(r, &t)| argmax(logits.row(*r)) == t)
                .count();
            Ok((hits, m.targets.len()))
        })
        .collect::<Result<_>>()?;
    let (hits, total) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(hits as f64 / total as f64)
}
