//! Run configuration: a JSON file whose fields are all optional, overlaid
//! by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{MlmConfig, TransformerConfig};
use crate::error::{Error, Result};
use crate::harness::{parse_sweep_values, GridPoint, SweepAxis, SweepValue, TrainConfig};
use crate::knowledge::ClassifierConfig;
use crate::prompts::StrategyConfig;
use crate::text::{CategoryCorpusConfig, TriggerTaskConfig};

/// A task given as files instead of the synthetic trigger task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TaskFiles {
    pub spec: PathBuf,
    pub data: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic trigger task, used when `task_files` is unset.
    pub task: TriggerTaskConfig,
    pub task_files: Option<TaskFiles>,
    /// Synthetic category corpus, used when `corpus_manifest` is unset.
    pub corpus: CategoryCorpusConfig,
    /// JSON object mapping text files to category names.
    pub corpus_manifest: Option<PathBuf>,
    /// Unlabelled sentences for masked-LM pretraining.
    pub mlm_sentences: usize,
    pub dev_frac: f64,
    pub test_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TriggerTaskConfig::default(),
            task_files: None,
            corpus: CategoryCorpusConfig::default(),
            corpus_manifest: None,
            mlm_sentences: 2000,
            dev_frac: 0.2,
            test_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    /// Load this checkpoint instead of building and pretraining a model.
    pub checkpoint: Option<PathBuf>,
    /// `vocab_size` is ignored and taken from the built vocabulary.
    pub model: TransformerConfig,
    /// `seed` is ignored; initialisation and masking follow the run seed.
    pub mlm: MlmConfig,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model: TransformerConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                ff_dim: 64,
                max_context: 160,
                ..Default::default()
            },
            mlm: MlmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub checkpoint: Option<PathBuf>,
    pub config: ClassifierConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotSection {
    pub k: usize,
    pub grid: Vec<GridPoint>,
}

impl Default for FewShotSection {
    fn default() -> Self {
        Self {
            k: 32,
            grid: GridPoint::default_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub axis: Option<String>,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Sentences projected in 2-D.
    pub sample: usize,
    /// Test instances written to the case study.
    pub cases: usize,
    /// Seeds of the random tables compared against the classifier embedding.
    pub random_seeds: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            sample: crate::analysis::DEFAULT_SAMPLE,
            cases: 3,
            random_seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneSection,
    pub classifier: ClassifierSection,
    pub strategy: StrategyConfig,
    pub train: TrainConfig,
    pub few_shot: FewShotSection,
    pub sweep: SweepSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            backbone: BackboneSection::default(),
            classifier: ClassifierSection::default(),
            strategy: StrategyConfig::default(),
            train: TrainConfig {
                max_epochs: 15,
                warmup_steps: 20,
                batch_size: 16,
                grad_accum_steps: 1,
                ..Default::default()
            },
            few_shot: FewShotSection::default(),
            sweep: SweepSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

/// Flags that override config fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<String>,
    pub axis: Option<String>,
    pub values: Option<String>,
    pub k: Option<usize>,
}

/// A config with flags applied, plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub path: Option<PathBuf>,
    /// sha256 of the config file bytes, or of the resolved config when no
    /// file was given.
    pub hash: String,
    /// Relative paths in the config resolve against this directory.
    pub base: PathBuf,
}

/// JSON schema of [`RunConfig`], as checked in under `schema/`.
pub fn config_schema() -> String {
    let schema = schemars::schema_for!(RunConfig);
    serde_json::to_string_pretty(&schema).expect("schema serializes") + "\n"
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl LoadedConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let (mut config, hash, base) = match path {
            Some(p) => {
                let bytes = fs::read(p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
                let config: RunConfig = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (config, sha256_hex(&bytes), base)
            }
            None => {
                let c = RunConfig::default();
                let h = sha256_hex(serde_json::to_string(&c)?.as_bytes());
                (c, h, PathBuf::new())
            }
        };
        config.apply(overrides)?;
        Ok(Self {
            config,
            path: path.map(Path::to_path_buf),
            hash,
            base,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(s) = &o.strategy {
            for v in parse_sweep_values(SweepAxis::Strategy, &[s.as_str()])? {
                v.apply_to(&mut self.strategy);
            }
        }
        if let Some(a) = &o.axis {
            self.sweep.axis = Some(a.clone());
        }
        if let Some(v) = &o.values {
            self.sweep.values = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        }
        if let Some(k) = o.k {
            self.few_shot.k = k;
        }
        Ok(())
    }

    /// Checks every section that does not need data or a model.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.task_files.is_none() {
            d.task.validate()?;
        }
        if d.corpus_manifest.is_none() {
            d.corpus.marker_sets()?;
        }
        if !(d.dev_frac > 0.0 && d.test_frac > 0.0 && d.dev_frac + d.test_frac < 1.0) {
            return Err(Error::config(format!(
                "dev_frac {} and test_frac {} must be positive with a sum below 1",
                d.dev_frac, d.test_frac
            )));
        }
        if self.backbone.checkpoint.is_none() {
            let mut m = self.backbone.model.clone();
            m.vocab_size = m.vocab_size.max(1);
            m.validate()?;
            self.backbone.mlm.validate()?;
        }
        self.classifier.config.validate()?;
        self.strategy.validate()?;
        self.train.validate()?;
        if self.few_shot.k == 0 {
            return Err(Error::config("few-shot k must be positive"));
        }
        if self.few_shot.grid.is_empty() {
            return Err(Error::config("few-shot grid is empty"));
        }
        for p in &self.few_shot.grid {
            if !(p.lr.is_finite() && p.lr >= 0.0) || p.prompt_len == 0 {
                return Err(Error::config(format!("invalid grid point {p:?}")));
            }
        }
        Ok(())
    }

    /// Parsed sweep axis and values; both must be set.
    pub fn sweep_plan(&self) -> Result<(SweepAxis, Vec<SweepValue>, Vec<String>)> {
        let axis = self
            .sweep
            .axis
            .as_deref()
            .ok_or_else(|| Error::config("sweep needs an axis (--axis or sweep.axis)"))?;
        let axis = SweepAxis::parse(axis)?;
        let raw: Vec<&str> = self.sweep.values.iter().map(String::as_str).collect();
        let values = parse_sweep_values(axis, &raw)?;
        Ok((axis, values, self.sweep.values.clone()))
    }
}
