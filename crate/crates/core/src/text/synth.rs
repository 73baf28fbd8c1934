//! Synthetic desk-scale corpora with known ground truth.
//!
//! Both generators draw background words from one shared Zipf-like
//! distribution and plant class-specific tokens, so a lookup rule over the
//! planted tokens classifies every example correctly.

use std::collections::HashSet;

use indexmap::IndexMap;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::category::{CategoryExample, CategoryLabel};
use super::task::{RawInstance, TaskSpec};
use crate::error::{Error, Result};
use crate::tensor::init::{self, SeedRng};

pub fn background_word(i: usize) -> String {
    format!("w{i:03}")
}

pub fn marker_word(category: usize, j: usize) -> String {
    format!("k{category:02}m{j:02}")
}

pub fn trigger_word(i: usize) -> String {
    format!("t{i:03}")
}

struct Background {
    words: Vec<String>,
    dist: WeightedIndex<f64>,
}

impl Background {
    fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::config("background vocabulary must be non-empty"));
        }
        let weights: Vec<f64> = (0..size).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        Ok(Self {
            words: (0..size).map(background_word).collect(),
            dist: WeightedIndex::new(weights).expect("positive weights"),
        })
    }

    fn sample(&self, rng: &mut SeedRng, n: usize) -> Vec<String> {
        (0..n).map(|_| self.words[self.dist.sample(rng)].clone()).collect()
    }
}

fn check_len_range(min: usize, max: usize) -> Result<()> {
    if min == 0 || min > max {
        return Err(Error::config(format!("invalid length range {min}..={max}")));
    }
    Ok(())
}

fn insert_at_random(rng: &mut SeedRng, words: &mut Vec<String>, extra: Vec<String>) {
    for w in extra {
        let pos = rng.gen_range(0..=words.len());
        words.insert(pos, w);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default)]
pub struct CategoryCorpusConfig {
    pub per_category: usize,
    pub markers_per_category: usize,
    pub markers_per_text: usize,
    pub background_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Optional explicit marker words, one list per category.
    pub markers: Option<Vec<Vec<String>>>,
}

impl Default for CategoryCorpusConfig {
    fn default() -> Self {
        Self {
            per_category: 200,
            markers_per_category: 8,
            markers_per_text: 2,
            background_size: 300,
            min_len: 8,
            max_len: 16,
            markers: None,
        }
    }
}

impl CategoryCorpusConfig {
    /// Marker words per category, validated to be pairwise disjoint.
    pub fn marker_sets(&self) -> Result<Vec<Vec<String>>> {
        let sets = match &self.markers {
            Some(m) => {
                if m.len() != CategoryLabel::COUNT {
                    return Err(Error::config(format!(
                        "need marker lists for {} categories, got {}",
                        CategoryLabel::COUNT,
                        m.len()
                    )));
                }
                m.clone()
            }
            None => (0..CategoryLabel::COUNT)
                .map(|c| (0..self.markers_per_category).map(|j| marker_word(c, j)).collect())
                .collect(),
        };
        let mut seen = HashSet::new();
        let background: HashSet<String> = (0..self.background_size).map(background_word).collect();
        for (c, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::config(format!("category {c} has no marker tokens")));
            }
            for w in set {
                if !seen.insert(w.clone()) {
                    return Err(Error::config(format!("marker '{w}' appears in more than one category")));
                }
                if background.contains(w) {
                    return Err(Error::config(format!("marker '{w}' collides with a background word")));
                }
            }
        }
        Ok(sets)
    }
}

/// Category-major corpus: `per_category` texts for each of the 13 labels.
pub fn gen_synth_category_corpus(cfg: &CategoryCorpusConfig, seed: u64) -> Result<Vec<CategoryExample>> {
    check_len_range(cfg.min_len, cfg.max_len)?;
    if cfg.markers_per_text == 0 {
        return Err(Error::config("markers_per_text must be at least 1"));
    }
    let markers = cfg.marker_sets()?;
    let bg = Background::new(cfg.background_size)?;
    let mut rng = init::rng(init::derive_seed(seed, "category-corpus"));
    let mut out = Vec::with_capacity(cfg.per_category * CategoryLabel::COUNT);
    for category in CategoryLabel::ALL {
        let set = &markers[category.index()];
        for _ in 0..cfg.per_category {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut words = bg.sample(&mut rng, len);
            let planted: Vec<String> = (0..cfg.markers_per_text)
                .map(|_| set.choose(&mut rng).expect("non-empty").clone())
                .collect();
            insert_at_random(&mut rng, &mut words, planted);
            out.push(CategoryExample {
                text: words.join(" "),
                category,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default)]
pub struct TriggerTaskConfig {
    pub classes: usize,
    pub triggers: usize,
    pub per_class: usize,
    pub background_size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for TriggerTaskConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            triggers: 128,
            per_class: 500,
            background_size: 200,
            min_len: 6,
            max_len: 12,
        }
    }
}

impl TriggerTaskConfig {
    pub fn validate(&self) -> Result<()> {
        check_len_range(self.min_len, self.max_len)?;
        if self.classes < 2 {
            return Err(Error::config("trigger task needs at least 2 classes"));
        }
        if self.triggers < self.classes {
            return Err(Error::config("need at least one trigger per class"));
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        if self.classes == 2 {
            vec!["false".into(), "true".into()]
        } else {
            (0..self.classes).map(|c| format!("class{c}")).collect()
        }
    }

    pub fn label_words(&self) -> Vec<String> {
        if self.classes == 2 {
            vec!["no".into(), "yes".into()]
        } else {
            (0..self.classes).map(|c| format!("ans{c}")).collect()
        }
    }

    /// Trigger `i` belongs to class `i % classes`.
    pub fn trigger_class(&self, trigger: usize) -> usize {
        trigger % self.classes
    }

    pub fn task_spec(&self, max_len: usize) -> TaskSpec {
        TaskSpec {
            name: "trigger".into(),
            fields: vec!["text".into()],
            template: "{text} answer : [MASK]".into(),
            verbalizer: self.label_names().into_iter().zip(self.label_words()).collect(),
            max_len,
            label_field: "label".into(),
        }
    }
}

/// Each instance holds exactly one trigger word; its class is the label.
pub fn gen_synth_task(cfg: &TriggerTaskConfig, seed: u64) -> Result<Vec<RawInstance>> {
    cfg.validate()?;
    let bg = Background::new(cfg.background_size)?;
    let names = cfg.label_names();
    let mut rng = init::rng(init::derive_seed(seed, "trigger-task"));
    let by_class: Vec<Vec<usize>> = (0..cfg.classes)
        .map(|c| (0..cfg.triggers).filter(|&t| cfg.trigger_class(t) == c).collect())
        .collect();
    let mut out = Vec::with_capacity(cfg.classes * cfg.per_class);
    for i in 0..cfg.per_class {
        for (class, triggers) in by_class.iter().enumerate() {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut words = bg.sample(&mut rng, len - 1);
            let t = *triggers.choose(&mut rng).expect("non-empty");
            insert_at_random(&mut rng, &mut words, vec![trigger_word(t)]);
            out.push(RawInstance {
                id: format!("trig{:05}", i * cfg.classes + class),
                fields: IndexMap::from([("text".to_string(), words.join(" "))]),
                label: names[class].clone(),
            });
        }
    }
    Ok(out)
}

/// Unlabelled sentences in the trigger task's template with the answer slot
/// filled by a uniformly random verbalizer word, so the answer is
/// uncorrelated with the triggers.
pub fn trigger_mlm_sentences(cfg: &TriggerTaskConfig, count: usize, seed: u64) -> Result<Vec<String>> {
    let raw_cfg = TriggerTaskConfig {
        per_class: count.div_ceil(cfg.classes),
        ..cfg.clone()
    };
    let raws = gen_synth_task(&raw_cfg, init::derive_seed(seed, "mlm"))?;
    let words = cfg.label_words();
    let mut rng = init::rng(init::derive_seed(seed, "mlm-answers"));
    Ok(raws
        .into_iter()
        .take(count)
        .map(|r| format!("{} answer : {}", r.fields["text"], words.choose(&mut rng).expect("non-empty")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::tokenize;

    fn marker_oracle(cfg: &CategoryCorpusConfig, text: &str) -> Option<usize> {
        let sets = cfg.marker_sets().unwrap();
        tokenize(text)
            .iter()
            .find_map(|w| sets.iter().position(|s| s.contains(w)))
    }

    #[test]
    fn category_corpus_shape_and_oracle() {
        let cfg = CategoryCorpusConfig::default();
        let corpus = gen_synth_category_corpus(&cfg, 7).unwrap();
        assert_eq!(corpus.len(), 2600);
        let labels: HashSet<_> = corpus.iter().map(|e| e.category).collect();
        assert_eq!(labels.len(), 13);
        let correct = corpus
            .iter()
            .filter(|e| marker_oracle(&cfg, &e.text) == Some(e.category.index()))
            .count();
        assert_eq!(correct, corpus.len());
        assert_eq!(corpus, gen_synth_category_corpus(&cfg, 7).unwrap());
    }

    #[test]
    fn overlapping_markers_rejected() {
        let mut sets: Vec<Vec<String>> = (0..13).map(|c| vec![format!("m{c}")]).collect();
        sets[3].push("m0".into());
        let cfg = CategoryCorpusConfig {
            markers: Some(sets),
            ..Default::default()
        };
        assert!(gen_synth_category_corpus(&cfg, 0).is_err());
    }

    #[test]
    fn trigger_task_shape_and_oracle() {
        let cfg = TriggerTaskConfig::default();
        let data = gen_synth_task(&cfg, 3).unwrap();
        assert_eq!(data.len(), 1000);
        let names = cfg.label_names();
        let mut seen = HashSet::new();
        for r in &data {
            let triggers: Vec<usize> = tokenize(&r.fields["text"])
                .iter()
                .filter_map(|w| w.strip_prefix('t').and_then(|n| n.parse().ok()))
                .collect();
            assert_eq!(triggers.len(), 1);
            let classes: HashSet<usize> = triggers.iter().map(|&t| cfg.trigger_class(t)).collect();
            assert_eq!(classes.len(), 1, "instance mixes trigger classes");
            assert_eq!(names[cfg.trigger_class(triggers[0])], r.label);
            seen.insert(triggers[0]);
        }
        assert!(seen.len() >= 100);
    }

    #[test]
    fn mlm_sentences_cover_answers() {
        let cfg = TriggerTaskConfig::default();
        let s = trigger_mlm_sentences(&cfg, 50, 1).unwrap();
        assert_eq!(s.len(), 50);
        assert!(s.iter().any(|l| l.ends_with("yes")) && s.iter().any(|l| l.ends_with("no")));
    }
}
