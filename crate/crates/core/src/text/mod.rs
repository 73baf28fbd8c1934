//! Tokenization, cloze templates, dataset splits, and synthetic corpora.

pub mod category;
pub mod split;
pub mod synth;
pub mod task;
pub mod vocab;

pub use category::{CategoryExample, CategoryLabel};
pub use split::{kfold_split, sample_few_shot, stratified_holdout, FewShotSplit};
pub use synth::{gen_synth_category_corpus, gen_synth_task, CategoryCorpusConfig, TriggerTaskConfig};
pub use task::{Dataset, LabeledInstance, RawInstance, TaskSpec};
pub use vocab::{tokenize, Vocabulary};
