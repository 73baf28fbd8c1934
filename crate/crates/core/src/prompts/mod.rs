//! Prompt generators: a shared task prompt, per-layer prefixes, and the
//! instance-wise strategies (random table, pretrained table, encoder).
//!
//! Instance-wise strategies produce `k` rows per instance. With the default
//! `prompt-tuning` base those rows are prepended at the input layer; with the
//! `prefix-tuning` base each layer receives its own projection of them as
//! per-layer prefixes. An optional hard type prefix prepends the frozen
//! backbone embeddings of a category phrase before the soft rows.

mod encoder;

pub use encoder::{size_hidden, EncoderKind, EncoderShape};

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{flop_count, flop_count_prefixed, Backbone, BackboneVars, PromptVars, PromptedInput};
use crate::error::{Error, Result};
use crate::tensor::init;
use crate::tensor::{Graph, Parameter, Tensor, Var};
use crate::text::{CategoryLabel, LabeledInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    TaskPrompt,
    Prefix,
    RandomIpt,
    PretrainedIpt,
    EncoderIpt,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        Self::TaskPrompt,
        Self::Prefix,
        Self::RandomIpt,
        Self::PretrainedIpt,
        Self::EncoderIpt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::TaskPrompt => "task-prompt",
            Self::Prefix => "prefix",
            Self::RandomIpt => "random-ipt",
            Self::PretrainedIpt => "pretrained-ipt",
            Self::EncoderIpt => "encoder-ipt",
        }
    }

    pub fn is_instance_wise(self) -> bool {
        matches!(self, Self::RandomIpt | Self::PretrainedIpt | Self::EncoderIpt)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where generated rows enter the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum PromptBase {
    /// Prepended at the input layer.
    #[default]
    PromptTuning,
    /// Projected per layer into key/value prefixes.
    PrefixTuning,
}

/// The `strategy` block of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub strategy: StrategyKind,
    pub encoder: EncoderKind,
    /// `L` for task prompts, prefixes and table lookups; `k` for encoders.
    pub prompt_len: usize,
    pub utilization_rate: f64,
    pub hard_prefix: Option<String>,
    pub base: PromptBase,
    /// Prompt table width `d_p`; defaults to the backbone width.
    pub table_dim: Option<usize>,
    /// Encoder parameter budget as a fraction of backbone parameters. The
    /// budget is further capped at a third of a same-length prefix's count.
    pub encoder_budget: f64,
    /// Overrides the budget-derived encoder width.
    pub encoder_hidden: Option<usize>,
    /// Std of random prompt rows; defaults to the RMS of the backbone's
    /// token embeddings.
    pub init_std: Option<f64>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::RandomIpt,
            encoder: EncoderKind::Cnn,
            prompt_len: 20,
            utilization_rate: 1.0,
            hard_prefix: None,
            base: PromptBase::PromptTuning,
            table_dim: None,
            encoder_budget: 0.005,
            encoder_hidden: None,
            init_std: None,
        }
    }
}

impl StrategyConfig {
    pub fn new(strategy: StrategyKind) -> Self {
        Self {
            strategy,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::config("prompt_len must be positive"));
        }
        if !(self.utilization_rate > 0.0 && self.utilization_rate <= 1.0) {
            return Err(Error::config(format!(
                "utilization_rate {} outside (0, 1]",
                self.utilization_rate
            )));
        }
        if !(self.encoder_budget > 0.0 && self.encoder_budget < 1.0) {
            return Err(Error::config("encoder_budget must lie in (0, 1)"));
        }
        if self.table_dim == Some(0) || self.encoder_hidden == Some(0) {
            return Err(Error::config("table_dim and encoder_hidden must be positive"));
        }
        if let Some(s) = self.init_std {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::config("init_std must be positive"));
            }
        }
        if let Some(name) = &self.hard_prefix {
            CategoryLabel::parse(name)?;
        }
        if self.strategy == StrategyKind::Prefix {
            if self.base == PromptBase::PrefixTuning {
                return Err(Error::config("base applies to instance-wise strategies only"));
            }
            if self.hard_prefix.is_some() {
                return Err(Error::config("hard_prefix needs an input-layer or instance-wise strategy"));
            }
        }
        if self.strategy == StrategyKind::TaskPrompt && self.base == PromptBase::PrefixTuning {
            return Err(Error::config("base applies to instance-wise strategies only"));
        }
        Ok(())
    }

    pub fn hard_prefix_label(&self) -> Result<Option<CategoryLabel>> {
        self.hard_prefix.as_deref().map(CategoryLabel::parse).transpose()
    }

    /// Tokens consumed by an encoder from an instance of length `n`.
    pub fn consumed_tokens(&self, n: usize) -> usize {
        utilized_len(self.utilization_rate, n)
    }
}

/// `clamp(ceil(r·n), 1, n)`
pub fn utilized_len(rate: f64, n: usize) -> usize {
    // the epsilon keeps 0.1 * 200 from rounding up to 21
    ((rate * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Token ids for a table lookup of length `l`: the first `l` ids, cycling
/// from the start when the instance is shorter.
pub fn lookup_ids(token_ids: &[usize], l: usize) -> Vec<usize> {
    token_ids.iter().copied().cycle().take(l).collect()
}

/// A generated `k × d` prompt and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVectors {
    pub rows: Tensor,
    pub strategy: String,
    pub instance_id: String,
}

impl PromptVectors {
    pub fn new(rows: Tensor, strategy: impl Into<String>, instance_id: impl Into<String>) -> Result<Self> {
        if !rows.is_finite() {
            return Err(Error::data("prompt vectors contain non-finite values"));
        }
        Ok(Self {
            rows,
            strategy: strategy.into(),
            instance_id: instance_id.into(),
        })
    }

    pub fn k(&self) -> usize {
        self.rows.rows()
    }
}

/// An initial prompt table (`|V| × d_p`).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTable {
    pub table: Tensor,
}

/// Category phrase whose backbone embeddings are prepended to the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardTypePrefix {
    pub category: CategoryLabel,
    pub token_ids: Vec<usize>,
}

impl HardTypePrefix {
    pub fn new(category: CategoryLabel, backbone: &Backbone) -> Result<Self> {
        let tokens = category.phrase_tokens();
        let missing: Vec<String> = tokens.iter().filter(|t| backbone.vocab.id(t).is_none()).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::VocabMismatch(missing));
        }
        Ok(Self {
            category,
            token_ids: tokens.iter().map(|t| backbone.vocab.id(t).expect("checked")).collect(),
        })
    }
}

/// Prepends the phrase's backbone embeddings before `prompts`.
pub fn hard_prefix_apply(prefix: &HardTypePrefix, prompts: &PromptVectors, backbone: &Backbone) -> Result<PromptVectors> {
    let d = backbone.d_model();
    if prompts.rows.cols() != d {
        return Err(Error::invalid(format!("prompt width {} != backbone width {d}", prompts.rows.cols())));
    }
    let k = prefix.token_ids.len() + prompts.k();
    if k > backbone.config.max_context {
        return Err(Error::ContextOverflow {
            prompt: k,
            input: 0,
            max_context: backbone.config.max_context,
        });
    }
    let mut data = Vec::with_capacity(k * d);
    for &id in &prefix.token_ids {
        data.extend_from_slice(backbone.token_embedding(id));
    }
    data.extend_from_slice(prompts.rows.data());
    PromptVectors::new(Tensor::new(vec![k, d], data), prompts.strategy.clone(), prompts.instance_id.clone())
}

/// Per-layer prefixes from instance prompts: layer `l` gets `rows · P_l`.
pub fn prefix_ipt_compose<'a>(g: &Graph<'a>, rows: Var, projections: &[Var]) -> Vec<Var> {
    projections.iter().map(|&p| g.matmul(rows, p)).collect()
}

#[derive(Debug, Clone, PartialEq)]
enum Generator {
    Task,
    Prefix,
    Table { projected: bool },
    Encoder(EncoderShape),
}

/// A prompt strategy with its own parameters. Backbone parameters are never
/// owned here.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub config: StrategyConfig,
    d_model: usize,
    n_layers: usize,
    vocab_size: usize,
    generator: Generator,
    hard_prefix: Option<HardTypePrefix>,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Graph handles for a strategy's parameters, in [`Strategy::params`] order.
#[derive(Debug, Clone)]
pub struct StrategyVars {
    vars: Vec<Var>,
}

impl Strategy {
    /// Builds a strategy against `backbone`. Pretrained IPT needs `table`;
    /// Encoder IPT freezes `table` if given and otherwise copies the backbone
    /// token embeddings.
    pub fn new(cfg: StrategyConfig, backbone: &Backbone, seed: u64, table: Option<PromptTable>) -> Result<Self> {
        cfg.validate()?;
        let bc = &backbone.config;
        let (d, v, l) = (bc.d_model, bc.vocab_size, bc.n_layers);
        let mut rng = init::rng(init::derive_seed(seed, cfg.strategy.name()));
        let std = cfg.init_std.unwrap_or_else(|| rms(backbone.token_embeddings().data()));
        let k = cfg.prompt_len;
        let mut params = Vec::new();

        let hard_prefix = cfg
            .hard_prefix_label()?
            .map(|c| HardTypePrefix::new(c, backbone))
            .transpose()?;
        let check_table = |t: &Tensor| -> Result<()> {
            if t.shape().len() != 2 || t.rows() != v {
                return Err(Error::config(format!(
                    "prompt table has shape {:?}, expected {v} rows",
                    t.shape()
                )));
            }
            if let Some(dp) = cfg.table_dim {
                if dp != t.cols() {
                    return Err(Error::config(format!("table_dim {dp} does not match table width {}", t.cols())));
                }
            }
            Ok(())
        };

        let generator = match cfg.strategy {
            StrategyKind::TaskPrompt => {
                params.push(Parameter::new("prompt.task", init::normal(&mut rng, &[k, d], std)));
                Generator::Task
            }
            StrategyKind::Prefix => {
                for i in 0..l {
                    params.push(Parameter::new(format!("prompt.prefix.layer{i}"), init::normal(&mut rng, &[k, d], std)));
                }
                Generator::Prefix
            }
            StrategyKind::RandomIpt | StrategyKind::PretrainedIpt => {
                let t = match (cfg.strategy, table) {
                    (StrategyKind::PretrainedIpt, None) => {
                        return Err(Error::config("pretrained-ipt requires a pretrained prompt table"))
                    }
                    (_, Some(t)) => {
                        check_table(&t.table)?;
                        t.table
                    }
                    (_, None) => init::normal(&mut rng, &[v, cfg.table_dim.unwrap_or(d)], std),
                };
                let dp = t.cols();
                params.push(Parameter::new("prompt.table", t));
                if dp != d {
                    params.push(Parameter::new(
                        "prompt.table_proj",
                        init::fan_in_uniform(&mut rng, &[dp, d], dp),
                    ));
                }
                Generator::Table { projected: dp != d }
            }
            StrategyKind::EncoderIpt => {
                let t = match table {
                    Some(t) => {
                        check_table(&t.table)?;
                        t.table
                    }
                    None => match cfg.table_dim {
                        Some(dp) if dp != d => init::normal(&mut rng, &[v, dp], std),
                        _ => backbone.token_embeddings().clone(),
                    },
                };
                let d_in = t.cols();
                params.push(Parameter::frozen("prompt.table", t));
                let budget = ((cfg.encoder_budget * backbone.num_params() as f64).floor() as usize).min(l * k * d / 3);
                let hidden = cfg
                    .encoder_hidden
                    .unwrap_or_else(|| size_hidden(cfg.encoder, d_in, d, k, budget));
                let shape = EncoderShape {
                    kind: cfg.encoder,
                    d_in,
                    hidden,
                    d_out: d,
                    k,
                };
                params.extend(shape.init(&mut rng));
                Generator::Encoder(shape)
            }
        };
        if cfg.strategy.is_instance_wise() && cfg.base == PromptBase::PrefixTuning {
            for i in 0..l {
                params.push(Parameter::new(format!("prompt.compose.layer{i}"), init::identity(d)));
            }
        }
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Self {
            config: cfg,
            d_model: d,
            n_layers: l,
            vocab_size: v,
            generator,
            hard_prefix,
            params,
            index,
        })
    }

    pub fn kind(&self) -> StrategyKind {
        self.config.strategy
    }

    pub fn name(&self) -> String {
        match &self.generator {
            Generator::Encoder(s) => format!("{}-{}", self.kind(), s.kind),
            _ => self.kind().to_string(),
        }
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    /// The parameters an optimizer may update.
    pub fn trainable_params(&self) -> Vec<&Parameter> {
        self.params.iter().filter(|p| !p.is_frozen()).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_params().iter().map(|p| p.numel()).sum()
    }

    pub fn encoder_shape(&self) -> Option<EncoderShape> {
        match &self.generator {
            Generator::Encoder(s) => Some(*s),
            _ => None,
        }
    }

    pub fn hard_prefix(&self) -> Option<&HardTypePrefix> {
        self.hard_prefix.as_ref()
    }

    /// Closed-form trainable count for this strategy's shapes.
    pub fn expected_trainable_count(&self) -> usize {
        let (d, k, l) = (self.d_model, self.config.prompt_len, self.n_layers);
        let core = match &self.generator {
            Generator::Task => k * d,
            Generator::Prefix => l * k * d,
            Generator::Table { projected } => {
                let dp = self.table_dim();
                self.vocab_size * dp + if *projected { dp * d } else { 0 }
            }
            Generator::Encoder(s) => s.param_count(),
        };
        core + if self.composes() { l * d * d } else { 0 }
    }

    pub fn table_dim(&self) -> usize {
        self.param("prompt.table").map_or(self.d_model, |p| p.tensor.cols())
    }

    fn composes(&self) -> bool {
        self.config.strategy.is_instance_wise() && self.config.base == PromptBase::PrefixTuning
    }

    /// Rows of soft prompt an instance of length `n` receives, hard prefix
    /// included. Zero for per-layer prefixes.
    pub fn input_prompt_len(&self) -> usize {
        if self.kind() == StrategyKind::Prefix || self.composes() {
            0
        } else {
            self.prompt_rows()
        }
    }

    /// Rows generated per instance, hard prefix included.
    pub fn prompt_rows(&self) -> usize {
        self.hard_prefix.as_ref().map_or(0, |h| h.token_ids.len()) + self.config.prompt_len
    }

    /// Per-layer prefix rows, if any.
    pub fn layer_prefix_len(&self) -> usize {
        if self.kind() == StrategyKind::Prefix || self.composes() {
            self.prompt_rows()
        } else {
            0
        }
    }

    /// Checks that prompts plus `max_len` input tokens fit the backbone.
    pub fn check_fits(&self, backbone: &Backbone, max_len: usize) -> Result<()> {
        backbone.config.check_fits(self.input_prompt_len() + self.layer_prefix_len(), max_len)
    }

    /// Matmul FLOPs spent generating a prompt for an input of length `n`.
    pub fn generator_flops(&self, n: usize) -> u64 {
        let (d, k) = (self.d_model as u64, self.prompt_rows() as u64);
        let core = match &self.generator {
            Generator::Task | Generator::Prefix => 0,
            Generator::Table { projected } => {
                if *projected {
                    2 * self.config.prompt_len as u64 * self.table_dim() as u64 * d
                } else {
                    0
                }
            }
            Generator::Encoder(s) => s.flop_count(self.config.consumed_tokens(n)),
        };
        core + if self.composes() {
            self.n_layers as u64 * 2 * k * d * d
        } else {
            0
        }
    }

    /// Generator plus full-vocabulary backbone FLOPs for an input of length
    /// `n`.
    pub fn flop_count(&self, backbone: &Backbone, n: usize) -> u64 {
        let bb = match self.layer_prefix_len() {
            0 => flop_count(&backbone.config, n + self.input_prompt_len()),
            p => flop_count_prefixed(&backbone.config, n, p),
        };
        self.generator_flops(n) + bb
    }

    pub fn bind<'a>(&'a self, g: &Graph<'a>) -> StrategyVars {
        StrategyVars {
            vars: self.params.iter().map(|p| g.param(p)).collect(),
        }
    }

    fn var(&self, sv: &StrategyVars, name: &str) -> Var {
        sv.vars[self.index[name]]
    }

    /// The instance's prompt rows (`k' × d`) before any per-layer
    /// composition; `None` for per-layer prefix tuning.
    pub fn instance_rows<'a>(
        &self,
        g: &Graph<'a>,
        sv: &StrategyVars,
        bb: &BackboneVars,
        token_ids: &[usize],
    ) -> Result<Option<Var>> {
        if token_ids.is_empty() {
            return Err(Error::invalid("empty input"));
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let k = self.config.prompt_len;
        let core = match &self.generator {
            Generator::Prefix => return Ok(None),
            Generator::Task => self.var(sv, "prompt.task"),
            Generator::Table { projected } => {
                let rows = g.gather(self.var(sv, "prompt.table"), &lookup_ids(token_ids, k));
                if *projected {
                    g.matmul(rows, self.var(sv, "prompt.table_proj"))
                } else {
                    rows
                }
            }
            Generator::Encoder(shape) => {
                let m = self.config.consumed_tokens(token_ids.len());
                let x = g.gather(self.var(sv, "prompt.table"), &token_ids[..m]);
                let w: Vec<Var> = shape.layout().iter().map(|(n, _, _)| self.var(sv, n)).collect();
                shape.forward(g, &w, x)
            }
        };
        Ok(Some(match &self.hard_prefix {
            Some(h) => g.concat_rows(&[g.gather(bb.tok_emb, &h.token_ids), core]),
            None => core,
        }))
    }

    /// Prompt rows placed for the backbone's forward pass.
    pub fn prompt_vars<'a>(
        &self,
        g: &Graph<'a>,
        sv: &StrategyVars,
        bb: &BackboneVars,
        token_ids: &[usize],
    ) -> Result<PromptVars> {
        if self.kind() == StrategyKind::Prefix {
            return Ok(PromptVars::layers(
                (0..self.n_layers).map(|i| self.var(sv, &format!("prompt.prefix.layer{i}"))).collect(),
            ));
        }
        let rows = self.instance_rows(g, sv, bb, token_ids)?.expect("input-layer strategy");
        if self.composes() {
            let proj: Vec<Var> = (0..self.n_layers)
                .map(|i| self.var(sv, &format!("prompt.compose.layer{i}")))
                .collect();
            Ok(PromptVars::layers(prefix_ipt_compose(g, rows, &proj)))
        } else {
            Ok(PromptVars::input(rows))
        }
    }

    /// Verbalizer logits (`1 × C`) of a prompted instance.
    pub fn logits<'a>(
        &'a self,
        g: &Graph<'a>,
        backbone: &'a Backbone,
        inst: &LabeledInstance,
        verbalizer_ids: &[usize],
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        let bb = backbone.bind(g);
        let sv = self.bind(g);
        let prompts = self.prompt_vars(g, &sv, &bb, &inst.token_ids)?;
        backbone.mask_logits(g, &bb, &inst.token_ids, inst.mask_position, &prompts, verbalizer_ids, dropout_seed)
    }

    /// Evaluates the instance's prompt rows outside training.
    pub fn generate(&self, backbone: &Backbone, inst: &LabeledInstance) -> Result<Option<PromptVectors>> {
        let g = Graph::new();
        let bb = backbone.bind(&g);
        let sv = self.bind(&g);
        match self.instance_rows(&g, &sv, &bb, &inst.token_ids)? {
            Some(v) => Ok(Some(PromptVectors::new(g.tensor(v), self.name(), inst.id.clone())?)),
            None => Ok(None),
        }
    }

    /// Data-level prompted input for the backbone.
    pub fn prompted_input(&self, backbone: &Backbone, inst: &LabeledInstance) -> Result<PromptedInput> {
        let g = Graph::new();
        let bb = backbone.bind(&g);
        let sv = self.bind(&g);
        let pv = self.prompt_vars(&g, &sv, &bb, &inst.token_ids)?;
        Ok(PromptedInput {
            token_ids: inst.token_ids.clone(),
            input_soft_prefix: pv.input.map(|v| g.tensor(v)),
            per_layer_prefixes: pv.layers.map(|ls| ls.into_iter().map(|v| g.tensor(v)).collect()),
            mask_position: inst.mask_position,
        })
    }
}

fn rms(data: &[f64]) -> f64 {
    let r = (data.iter().map(|v| v * v).sum::<f64>() / data.len().max(1) as f64).sqrt();
    if r > 0.0 {
        r
    } else {
        0.02
    }
}

#[cfg(test)]
mod tests;
