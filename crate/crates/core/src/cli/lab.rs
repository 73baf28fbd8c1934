//! Builds the data, vocabulary, backbone and classifier a command needs.

use log::info;

use super::config::LoadedConfig;
use crate::backbone::{mlm_pretrain, Backbone, MlmReport};
use crate::error::{Error, Result};
use crate::knowledge::{label_corpus_by_description, pretrained_ipt_init, train_classifier, TrainedClassifier};
use crate::prompts::{PromptTable, Strategy, StrategyConfig, StrategyKind};
use crate::tensor::Tensor;
use crate::text::synth::trigger_mlm_sentences;
use crate::text::task::{read_jsonl, records_to_raw};
use crate::text::{
    gen_synth_category_corpus, gen_synth_task, tokenize, CategoryExample, CategoryLabel, Dataset, RawInstance,
    TaskSpec, Vocabulary,
};

pub struct Lab<'c> {
    pub loaded: &'c LoadedConfig,
}

impl<'c> Lab<'c> {
    pub fn new(loaded: &'c LoadedConfig) -> Self {
        Self { loaded }
    }

    fn cfg(&self) -> &super::config::RunConfig {
        &self.loaded.config
    }

    /// Fails on referenced files that do not exist.
    pub fn check_paths(&self) -> Result<()> {
        let c = self.cfg();
        let mut paths = Vec::new();
        if let Some(f) = &c.data.task_files {
            paths.extend([&f.spec, &f.data]);
        }
        paths.extend(c.data.corpus_manifest.iter());
        paths.extend(c.backbone.checkpoint.iter());
        paths.extend(c.classifier.checkpoint.iter());
        for p in paths {
            let r = self.loaded.resolve(p);
            if !r.is_file() {
                return Err(Error::config(format!("file not found: {}", r.display())));
            }
        }
        Ok(())
    }

    pub fn task(&self) -> Result<(TaskSpec, Vec<RawInstance>)> {
        let d = &self.cfg().data;
        match &d.task_files {
            Some(f) => {
                let spec = TaskSpec::load(&self.loaded.resolve(&f.spec))?;
                let raws = records_to_raw(&spec, &read_jsonl(&self.loaded.resolve(&f.data))?)?;
                Ok((spec, raws))
            }
            None => {
                let max_len = d.task.max_len + tokenize(&d.task.task_spec(0).template).len();
                Ok((d.task.task_spec(max_len), gen_synth_task(&d.task, self.cfg().seed)?))
            }
        }
    }

    pub fn corpus(&self) -> Result<Vec<CategoryExample>> {
        let d = &self.cfg().data;
        match &d.corpus_manifest {
            Some(m) => label_corpus_by_description(&self.loaded.resolve(m)),
            None => gen_synth_category_corpus(&d.corpus, self.cfg().seed),
        }
    }

    /// Masked-LM sentences: task-style sentences plus the category corpus.
    pub fn mlm_corpus(&self, raws: &[RawInstance], corpus: &[CategoryExample]) -> Result<Vec<String>> {
        let d = &self.cfg().data;
        let mut out = match d.task_files {
            Some(_) => raws.iter().map(|r| r.fields.values().cloned().collect::<Vec<_>>().join(" ")).collect(),
            None => trigger_mlm_sentences(&d.task, d.mlm_sentences, self.cfg().seed)?,
        };
        out.extend(corpus.iter().map(|e| e.text.clone()));
        Ok(out)
    }

    pub fn vocabulary(&self, spec: &TaskSpec, raws: &[RawInstance], mlm: &[String]) -> Result<Vocabulary> {
        let mut texts: Vec<&str> = mlm.iter().map(String::as_str).collect();
        texts.extend(raws.iter().flat_map(|r| r.fields.values().map(String::as_str)));
        let mut vocab = Vocabulary::build(&texts, 1)?;
        vocab.extend(tokenize(&spec.template).into_iter().filter(|t| !t.starts_with('{')));
        vocab.extend(spec.verbalizer.values());
        vocab.extend(CategoryLabel::ALL.iter().flat_map(|c| c.phrase_tokens()));
        Ok(vocab)
    }

    /// The configured checkpoint, or a fresh model over `vocab` that still
    /// needs pretraining (flagged by the second value).
    pub fn backbone(&self, vocab: Vocabulary) -> Result<(Backbone, bool)> {
        let b = &self.cfg().backbone;
        match &b.checkpoint {
            Some(p) => Ok((Backbone::load(&self.loaded.resolve(p))?, false)),
            None => {
                let cfg = crate::backbone::TransformerConfig {
                    vocab_size: vocab.len(),
                    ..b.model.clone()
                };
                Ok((Backbone::new(cfg, vocab, self.cfg().seed)?, b.mlm.steps > 0))
            }
        }
    }

    pub fn pretrain(&self, backbone: &mut Backbone, mlm: &[String]) -> Result<MlmReport> {
        let cfg = crate::backbone::MlmConfig {
            seed: self.cfg().seed,
            ..self.cfg().backbone.mlm.clone()
        };
        info!("pretraining backbone for {} steps", cfg.steps);
        mlm_pretrain(backbone, mlm, &cfg)
    }

    pub fn classifier(&self, backbone: &Backbone, corpus: &[CategoryExample]) -> Result<TrainedClassifier> {
        let c = &self.cfg().classifier;
        match &c.checkpoint {
            Some(p) => TrainedClassifier::load(&self.loaded.resolve(p)),
            None => train_classifier(corpus, &backbone.vocab, &c.config, backbone.d_model(), self.cfg().seed),
        }
    }

    /// Table for Pretrained IPT, reordered to the backbone vocabulary.
    pub fn table(&self, backbone: &Backbone, corpus: &[CategoryExample], cfg: &StrategyConfig) -> Result<Option<PromptTable>> {
        if cfg.strategy != StrategyKind::PretrainedIpt {
            return Ok(None);
        }
        let clf = self.classifier(backbone, corpus)?;
        pretrained_ipt_init(&clf, &backbone.vocab).map(Some)
    }

    /// Builds each strategy against `backbone` and checks it fits the
    /// task's longest input. Pretrained IPT is checked with a placeholder
    /// table of the configured width.
    pub fn check_strategies(&self, backbone: &Backbone, ds: &Dataset, configs: &[StrategyConfig]) -> Result<()> {
        let max_len = ds.instances.iter().map(|i| i.token_ids.len()).max().unwrap_or(0);
        for cfg in configs {
            let table = (cfg.strategy == StrategyKind::PretrainedIpt).then(|| {
                let dp = cfg
                    .table_dim
                    .or(self.cfg().classifier.config.embed_dim)
                    .unwrap_or(backbone.d_model());
                PromptTable {
                    table: Tensor::zeros(&[backbone.vocab.len(), dp]),
                }
            });
            Strategy::new(cfg.clone(), backbone, 0, table)?.check_fits(backbone, max_len)?;
        }
        Ok(())
    }
}
