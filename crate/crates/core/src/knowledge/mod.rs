//! Category-classifier pretraining. Texts are labelled by their source's
//! category, a small classifier is trained on them, and its embedding
//! layer seeds the pretrained-IPT prompt table.

use std::path::Path;

use indexmap::IndexMap;
use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Checkpoint;
use crate::error::{Error, Result};
use crate::prompts::PromptTable;
use crate::tensor::init;
use crate::tensor::{argmax, set_summed_grads, Adam, AdamConfig, GradMap, Graph, Parameter, Targets, Tensor, Var};
use crate::text::task::read_jsonl;
use crate::text::vocab::PAD;
use crate::text::{stratified_holdout, CategoryExample, CategoryLabel, Vocabulary};

pub const CHECKPOINT_KIND: &str = "classifier";

/// Reads a manifest file (JSON object: source path → category name) and
/// labels every text in each source with that source's category. Relative
/// source paths resolve against the manifest's directory.
pub fn label_corpus_by_description(manifest_path: &Path) -> Result<Vec<CategoryExample>> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: IndexMap<String, String> = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    label_sources(&manifest, base)
}

/// Like [`label_corpus_by_description`] for an in-memory manifest. All
/// category names are checked before any source is read.
pub fn label_sources(manifest: &IndexMap<String, String>, base: &Path) -> Result<Vec<CategoryExample>> {
    let labelled: Vec<(&String, CategoryLabel)> = manifest
        .iter()
        .map(|(path, cat)| Ok((path, CategoryLabel::parse(cat)?)))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (path, category) in labelled {
        let full = base.join(path);
        for text in read_source(&full)? {
            out.push(CategoryExample { text, category });
        }
    }
    Ok(out)
}

/// `.jsonl` sources contribute their `text` fields; anything else is read
/// as one text per non-blank line.
fn read_source(path: &Path) -> Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        read_jsonl(path)?
            .into_iter()
            .enumerate()
            .map(|(i, rec)| match rec.get("text") {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                _ => Err(Error::data(format!("{}: record {} has no string 'text' field", path.display(), i + 1))),
            })
            .collect()
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierArch {
    Cnn,
    #[serde(alias = "rnn")]
    Lstm,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub arch: ClassifierArch,
    /// Embedding width `d_p`; `None` uses the caller's default (the backbone width).
    pub embed_dim: Option<usize>,
    /// Convolution widths of the CNN.
    pub filter_widths: Vec<usize>,
    /// Filters per width.
    pub filters: usize,
    /// Hidden width of the LSTM and MLP variants.
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_frac: f64,
    /// Texts are truncated to this many tokens.
    pub max_len: usize,
    pub embed_std: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::Cnn,
            embed_dim: None,
            filter_widths: vec![2, 3, 4],
            filters: 16,
            hidden: 32,
            epochs: 8,
            batch_size: 32,
            lr: 5e-3,
            holdout_frac: 0.1,
            max_len: 64,
            embed_std: 0.5,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("filters", self.filters),
            ("hidden", self.hidden),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("classifier {name} must be positive")));
            }
        }
        if self.embed_dim == Some(0) {
            return Err(Error::config("classifier embed_dim must be positive"));
        }
        if self.filter_widths.is_empty() || self.filter_widths.contains(&0) {
            return Err(Error::config("classifier filter_widths must be non-empty and positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("classifier lr must be positive"));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return Err(Error::config(format!("holdout_frac {} outside (0, 1)", self.holdout_frac)));
        }
        if !(self.embed_std.is_finite() && self.embed_std > 0.0) {
            return Err(Error::config("classifier embed_std must be positive"));
        }
        Ok(())
    }
}

/// Stored alongside the weights in a classifier checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassifierMeta {
    config: ClassifierConfig,
    embed_dim: usize,
    holdout_accuracy: f64,
    init_loss: f64,
    epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    pub config: ClassifierConfig,
    pub vocab: Vocabulary,
    pub embed_dim: usize,
    pub holdout_accuracy: f64,
    /// Mean training loss before the first update.
    pub init_loss: f64,
    /// Mean training loss after each epoch.
    pub epoch_losses: Vec<f64>,
    params: Vec<Parameter>,
}

fn layout(cfg: &ClassifierConfig, v: usize, dp: usize) -> Vec<(String, Vec<usize>)> {
    let c = CategoryLabel::COUNT;
    let mut out = vec![("classifier.embedding".to_string(), vec![v, dp])];
    let feat = match cfg.arch {
        ClassifierArch::Cnn => {
            for &w in &cfg.filter_widths {
                out.push((format!("classifier.conv{w}.w"), vec![w * dp, cfg.filters]));
                out.push((format!("classifier.conv{w}.b"), vec![cfg.filters]));
            }
            cfg.filters * cfg.filter_widths.len()
        }
        ClassifierArch::Lstm => {
            let h = cfg.hidden;
            out.push(("classifier.lstm.wx".into(), vec![dp, 4 * h]));
            out.push(("classifier.lstm.wh".into(), vec![h, 4 * h]));
            out.push(("classifier.lstm.b".into(), vec![4 * h]));
            h
        }
        ClassifierArch::Mlp => {
            out.push(("classifier.fc.w".into(), vec![dp, cfg.hidden]));
            out.push(("classifier.fc.b".into(), vec![cfg.hidden]));
            cfg.hidden
        }
    };
    out.push(("classifier.out.w".into(), vec![feat, c]));
    out.push(("classifier.out.b".into(), vec![c]));
    out
}

impl TrainedClassifier {
    fn init(cfg: &ClassifierConfig, vocab: &Vocabulary, dp: usize, seed: u64) -> Self {
        let mut rng = init::rng(init::derive_seed(seed, "classifier"));
        let params = layout(cfg, vocab.len(), dp)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name == "classifier.embedding" {
                    init::normal(&mut rng, &shape, cfg.embed_std)
                } else if name == "classifier.out.w" {
                    // near-zero head: the first loss sits at the uniform baseline
                    init::normal(&mut rng, &shape, 1e-3)
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    init::fan_in_uniform(&mut rng, &shape, shape[0])
                };
                Parameter::new(name, t)
            })
            .collect();
        Self {
            config: cfg.clone(),
            vocab: vocab.clone(),
            embed_dim: dp,
            holdout_accuracy: 0.0,
            init_loss: f64::NAN,
            epoch_losses: Vec::new(),
            params,
        }
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    /// The `|V| × d_p` embedding table.
    pub fn embedding(&self) -> &Tensor {
        &self.params[0].tensor
    }

    fn encode_text(&self, text: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(text);
        ids.truncate(self.config.max_len);
        if ids.is_empty() {
            ids.push(PAD);
        }
        ids
    }

    /// `1 × 13` logits for one tokenized text.
    fn logits_graph<'a>(&'a self, g: &Graph<'a>, ids: &[usize]) -> Var {
        let w: Vec<Var> = self.params.iter().map(|p| g.param(p)).collect();
        let x = g.gather(w[0], ids);
        let n = w.len();
        let feat = match self.config.arch {
            ClassifierArch::Cnn => {
                let pooled: Vec<Var> = self
                    .config
                    .filter_widths
                    .iter()
                    .enumerate()
                    .map(|(i, &width)| {
                        let h = g.relu(g.conv1d(x, w[1 + 2 * i], w[2 + 2 * i], width, width / 2));
                        g.adaptive_max_pool(h, 1)
                    })
                    .collect();
                g.concat_cols(&pooled)
            }
            ClassifierArch::Lstm => {
                let hd = self.config.hidden;
                let mut h = g.constant(vec![0.0; hd], 1, hd);
                let mut c = g.constant(vec![0.0; hd], 1, hd);
                for t in 0..ids.len() {
                    (h, c) = g.lstm_cell(g.slice_rows(x, t, 1), h, c, w[1], w[2], w[3]);
                }
                h
            }
            ClassifierArch::Mlp => g.relu(g.linear(g.mean_rows(x), w[1], w[2])),
        };
        g.linear(feat, w[n - 2], w[n - 1])
    }

    fn loss_and_grads(&self, ids: &[usize], label: usize) -> Result<(f64, GradMap)> {
        let g = Graph::new();
        let logits = self.logits_graph(&g, ids);
        let loss = g.cross_entropy(logits, &Targets::Index(vec![label]))?;
        Ok((g.scalar(loss), g.backward(loss)?.by_param()))
    }

    fn loss(&self, ids: &[usize], label: usize) -> Result<f64> {
        let g = Graph::new();
        let logits = self.logits_graph(&g, ids);
        Ok(g.scalar(g.cross_entropy(logits, &Targets::Index(vec![label]))?))
    }

    pub fn logits(&self, text: &str) -> Vec<f64> {
        let g = Graph::new();
        let ids = self.encode_text(text);
        let v = self.logits_graph(&g, &ids);
        g.value(v)
    }

    pub fn predict(&self, text: &str) -> CategoryLabel {
        CategoryLabel::from_index(argmax(&self.logits(text))).expect("13-way head")
    }

    /// Fraction of `examples` whose predicted category is correct.
    pub fn accuracy(&self, examples: &[CategoryExample]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let hits = examples
            .par_iter()
            .filter(|e| self.predict(&e.text) == e.category)
            .count();
        hits as f64 / examples.len() as f64
    }

    fn mean_loss(&self, data: &[(Vec<usize>, usize)]) -> Result<f64> {
        let losses: Vec<f64> = data.par_iter().map(|(ids, y)| self.loss(ids, *y)).collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = ClassifierMeta {
            config: self.config.clone(),
            embed_dim: self.embed_dim,
            holdout_accuracy: self.holdout_accuracy,
            init_loss: self.init_loss,
            epoch_losses: self.epoch_losses.clone(),
        };
        let refs: Vec<&Parameter> = self.params.iter().collect();
        Checkpoint::from_params(CHECKPOINT_KIND, &meta, &self.vocab, self.epoch_losses.len() as u64, &refs)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let meta: ClassifierMeta = ck.config()?;
        meta.config.validate()?;
        let mut model = Self::init(&meta.config, &ck.vocab, meta.embed_dim, 0);
        ck.restore_into(model.params.iter_mut().collect())?;
        model.holdout_accuracy = meta.holdout_accuracy;
        model.init_loss = meta.init_loss;
        model.epoch_losses = meta.epoch_losses;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Trains a category classifier over `vocab` with a stratified holdout of
/// `cfg.holdout_frac`. `default_dim` is the embedding width used when the
/// config leaves it unset. Deterministic under `seed`.
pub fn train_classifier(
    examples: &[CategoryExample],
    vocab: &Vocabulary,
    cfg: &ClassifierConfig,
    default_dim: usize,
    seed: u64,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    let mut present: Vec<usize> = examples.iter().map(|e| e.category.index()).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::data(format!(
            "classifier training needs at least 2 categories, found {}",
            present.len()
        )));
    }
    let dp = cfg.embed_dim.unwrap_or(default_dim);
    if dp == 0 {
        return Err(Error::config("classifier embedding width must be positive"));
    }
    let mut model = TrainedClassifier::init(cfg, vocab, dp, seed);
    let labels: Vec<usize> = examples.iter().map(|e| e.category.index()).collect();
    let (train_idx, hold_idx) = stratified_holdout(&labels, cfg.holdout_frac, seed)?;
    let encoded: Vec<(Vec<usize>, usize)> = examples
        .iter()
        .map(|e| (model.encode_text(&e.text), e.category.index()))
        .collect();
    let train: Vec<(Vec<usize>, usize)> = train_idx.iter().map(|&i| encoded[i].clone()).collect();

    model.init_loss = model.mean_loss(&train)?;
    let mut adam = Adam::new(AdamConfig::new(cfg.lr, 0))?;
    let mut rng = init::rng(init::derive_seed(seed, "classifier-batches"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let m = &model;
            let grads: Vec<GradMap> = batch
                .par_iter()
                .map(|&i| m.loss_and_grads(&train[i].0, train[i].1).map(|r| r.1))
                .collect::<Result<_>>()?;
            set_summed_grads(model.params.iter_mut(), &grads, 1.0 / batch.len() as f64);
            adam.step(model.params.iter_mut());
        }
        let loss = model.mean_loss(&train)?;
        debug!("classifier epoch {} loss {loss:.4}", epoch + 1);
        model.epoch_losses.push(loss);
    }
    for p in &mut model.params {
        p.tensor.clear_grad();
    }
    let holdout: Vec<CategoryExample> = hold_idx.iter().map(|&i| examples[i].clone()).collect();
    model.holdout_accuracy = model.accuracy(&holdout);
    info!(
        "classifier: {} train / {} holdout, loss {:.4} -> {:.4}, holdout accuracy {:.3}",
        train.len(),
        holdout.len(),
        model.init_loss,
        model.epoch_losses.last().copied().unwrap_or(f64::NAN),
        model.holdout_accuracy
    );
    Ok(model)
}

/// A copy of the classifier's embedding table.
pub fn extract_embedding(classifier: &TrainedClassifier) -> PromptTable {
    let mut table = classifier.embedding().clone();
    table.set_requires_grad(false);
    PromptTable { table }
}

/// The embedding table with rows reordered to `target` vocabulary ids.
/// Every target token must exist in the classifier vocabulary.
pub fn pretrained_ipt_init(classifier: &TrainedClassifier, target: &Vocabulary) -> Result<PromptTable> {
    let missing = classifier.vocab.missing_from(target);
    if !missing.is_empty() {
        return Err(Error::VocabMismatch(missing));
    }
    let src = classifier.embedding();
    let rows: Vec<Vec<f64>> = target
        .tokens()
        .iter()
        .map(|t| src.row(classifier.vocab.id(t).expect("checked above")).to_vec())
        .collect();
    Ok(PromptTable {
        table: Tensor::from_rows(&rows),
    })
}

#[cfg(test)]
mod tests;
