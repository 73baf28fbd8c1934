//! The frozen masked-LM transformer and its prompted forward pass.
//!
//! Pre-LN encoder blocks with learned absolute positions, a final layer norm,
//! and a cloze head (`dense → gelu → layer norm → tied embeddings + bias`).
//! Positional embeddings cover soft-prefix positions as well, so a soft
//! prefix row equal to `e(w)` behaves exactly like the literal token `w`.
//!
//! Per-layer prefixes are `k` extra rows that join the keys and values of a
//! layer's attention. They pass through that layer's first layer norm and
//! key/value projections like ordinary hidden rows, but emit no queries and
//! therefore no output positions.

mod accounting;
mod checkpoint;
mod pretrain;

pub use accounting::{flop_count, flop_count_prefixed, param_count};
pub use checkpoint::{params_digest, Checkpoint, ParamBlob, FORMAT_VERSION};
pub use pretrain::{masked_accuracy, mlm_pretrain, MlmConfig, MlmReport};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::init::{self, SeedRng};
use crate::tensor::{Graph, Parameter, Tensor, Var};
use crate::text::{TaskSpec, Vocabulary};

pub const CHECKPOINT_KIND: &str = "backbone";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_context: usize,
    /// Applied only when a forward pass is given a dropout seed.
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ff_dim: 256,
            max_context: 256,
            dropout: 0.0,
            init_std: 0.02,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("max_context", self.max_context),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::config("init_std must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Checks that `prompt_len` soft rows plus `max_len` input tokens fit.
    pub fn check_fits(&self, prompt_len: usize, max_len: usize) -> Result<()> {
        if prompt_len + max_len > self.max_context {
            return Err(Error::ContextOverflow {
                prompt: prompt_len,
                input: max_len,
                max_context: self.max_context,
            });
        }
        Ok(())
    }
}

/// A data-level prompted instance, used for evaluation outside training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptedInput {
    pub token_ids: Vec<usize>,
    /// `k × d` rows prepended at the input layer.
    pub input_soft_prefix: Option<Tensor>,
    /// One `k × d` tensor per layer.
    pub per_layer_prefixes: Option<Vec<Tensor>>,
    pub mask_position: usize,
}

/// Prompt rows already placed on a graph.
#[derive(Debug, Clone, Default)]
pub struct PromptVars {
    pub input: Option<Var>,
    pub layers: Option<Vec<Var>>,
}

impl PromptVars {
    pub fn input(v: Var) -> Self {
        Self {
            input: Some(v),
            layers: None,
        }
    }

    pub fn layers(v: Vec<Var>) -> Self {
        Self {
            input: None,
            layers: Some(v),
        }
    }

    /// Number of output positions the prompt occupies before the input.
    pub fn offset(&self) -> usize {
        self.input.map_or(0, |v| v.rows())
    }

    fn prompt_len(&self) -> usize {
        self.offset() + self.layers.as_ref().and_then(|l| l.first()).map_or(0, |v| v.rows())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1_g: Parameter,
    ln1_b: Parameter,
    wq: Parameter,
    bq: Parameter,
    wk: Parameter,
    bk: Parameter,
    wv: Parameter,
    bv: Parameter,
    wo: Parameter,
    bo: Parameter,
    ln2_g: Parameter,
    ln2_b: Parameter,
    w1: Parameter,
    b1: Parameter,
    w2: Parameter,
    b2: Parameter,
}

impl Block {
    fn new(cfg: &TransformerConfig, i: usize, rng: &mut SeedRng) -> Self {
        let (d, f, s) = (cfg.d_model, cfg.ff_dim, cfg.init_std);
        let n = |part: &str| format!("backbone.block{i}.{part}");
        let mut w = |part: &str, rows: usize, cols: usize| Parameter::new(n(part), init::normal(rng, &[rows, cols], s));
        let wq = w("attn.wq", d, d);
        let wk = w("attn.wk", d, d);
        let wv = w("attn.wv", d, d);
        let wo = w("attn.wo", d, d);
        let w1 = w("ff.w1", d, f);
        let w2 = w("ff.w2", f, d);
        let ones = |part: &str, len: usize| Parameter::new(n(part), init::filled(&[len], 1.0));
        let zeros = |part: &str, len: usize| Parameter::new(n(part), Tensor::zeros(&[len]));
        Self {
            ln1_g: ones("ln1.gamma", d),
            ln1_b: zeros("ln1.beta", d),
            wq,
            bq: zeros("attn.bq", d),
            wk,
            bk: zeros("attn.bk", d),
            wv,
            bv: zeros("attn.bv", d),
            wo,
            bo: zeros("attn.bo", d),
            ln2_g: ones("ln2.gamma", d),
            ln2_b: zeros("ln2.beta", d),
            w1,
            b1: zeros("ff.b1", f),
            w2,
            b2: zeros("ff.b2", d),
        }
    }

    fn params(&self) -> [&Parameter; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Graph handles for every backbone parameter.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<[Var; 16]>,
    lnf_g: Var,
    lnf_b: Var,
    head_w: Var,
    head_b: Var,
    head_ln_g: Var,
    head_ln_b: Var,
    out_bias: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: TransformerConfig,
    pub vocab: Vocabulary,
    /// Pretraining steps taken so far.
    pub step: u64,
    tok_emb: Parameter,
    pos_emb: Parameter,
    blocks: Vec<Block>,
    lnf_g: Parameter,
    lnf_b: Parameter,
    head_w: Parameter,
    head_b: Parameter,
    head_ln_g: Parameter,
    head_ln_b: Parameter,
    out_bias: Parameter,
}

impl Backbone {
    /// Freshly initialised, trainable model.
    pub fn new(config: TransformerConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::config(format!(
                "vocab_size {} does not match vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = init::rng(init::derive_seed(seed, "backbone-init"));
        let (v, d, s) = (config.vocab_size, config.d_model, config.init_std);
        let tok_emb = Parameter::new("backbone.tok_emb", init::normal(&mut rng, &[v, d], s));
        let pos_emb = Parameter::new(
            "backbone.pos_emb",
            init::normal(&mut rng, &[config.max_context, d], s),
        );
        let blocks = (0..config.n_layers).map(|i| Block::new(&config, i, &mut rng)).collect();
        let head_w = Parameter::new("backbone.mlm.dense.w", init::normal(&mut rng, &[d, d], s));
        Ok(Self {
            step: 0,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Parameter::new("backbone.ln_f.gamma", init::filled(&[d], 1.0)),
            lnf_b: Parameter::new("backbone.ln_f.beta", Tensor::zeros(&[d])),
            head_w,
            head_b: Parameter::new("backbone.mlm.dense.b", Tensor::zeros(&[d])),
            head_ln_g: Parameter::new("backbone.mlm.ln.gamma", init::filled(&[d], 1.0)),
            head_ln_b: Parameter::new("backbone.mlm.ln.beta", Tensor::zeros(&[d])),
            out_bias: Parameter::new("backbone.mlm.out_bias", Tensor::zeros(&[v])),
            config,
            vocab,
        })
    }

    /// Every parameter in a fixed order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([
            &self.lnf_g,
            &self.lnf_b,
            &self.head_w,
            &self.head_b,
            &self.head_ln_g,
            &self.head_ln_b,
            &self.out_bias,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.head_w,
            &mut self.head_b,
            &mut self.head_ln_g,
            &mut self.head_ln_b,
            &mut self.out_bias,
        ]);
        out
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_frozen(frozen));
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| p.is_frozen())
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Row `id` of the token embedding table.
    pub fn token_embedding(&self, id: usize) -> &[f64] {
        self.tok_emb.tensor.row(id)
    }

    pub fn token_embeddings(&self) -> &Tensor {
        &self.tok_emb.tensor
    }

    /// Content hash over all parameter values.
    pub fn digest(&self) -> String {
        params_digest(self.params())
    }

    pub fn bind<'a>(&'a self, g: &Graph<'a>) -> BackboneVars {
        BackboneVars {
            tok_emb: g.param(&self.tok_emb),
            pos_emb: g.param(&self.pos_emb),
            blocks: self.blocks.iter().map(|b| b.params().map(|p| g.param(p))).collect(),
            lnf_g: g.param(&self.lnf_g),
            lnf_b: g.param(&self.lnf_b),
            head_w: g.param(&self.head_w),
            head_b: g.param(&self.head_b),
            head_ln_g: g.param(&self.head_ln_g),
            head_ln_b: g.param(&self.head_ln_b),
            out_bias: g.param(&self.out_bias),
        }
    }

    /// Final hidden states, `(k + n) × d`, where `k` is the input-layer
    /// prefix length. `dropout_seed` enables dropout when the configured rate
    /// is positive.
    pub fn encode<'a>(
        &self,
        g: &Graph<'a>,
        v: &BackboneVars,
        token_ids: &[usize],
        prompts: &PromptVars,
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.d_model;
        if token_ids.is_empty() {
            return Err(Error::invalid("empty input"));
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        if prompts.input.is_some() && prompts.layers.is_some() {
            return Err(Error::invalid(
                "input-layer and per-layer prefixes cannot be combined in one forward pass",
            ));
        }
        let k = prompts.prompt_len();
        if k + token_ids.len() > cfg.max_context {
            return Err(Error::ContextOverflow {
                prompt: k,
                input: token_ids.len(),
                max_context: cfg.max_context,
            });
        }
        if let Some(p) = prompts.input {
            check_width(p, d)?;
        }
        if let Some(layers) = &prompts.layers {
            if layers.len() != cfg.n_layers {
                return Err(Error::invalid(format!(
                    "expected {} per-layer prefixes, got {}",
                    cfg.n_layers,
                    layers.len()
                )));
            }
            for p in layers {
                check_width(*p, d)?;
            }
        }

        let mut drop_rng = dropout_seed
            .filter(|_| cfg.dropout > 0.0)
            .map(|s| init::rng(init::derive_seed(s, "dropout")));
        let mut dropout = |g: &Graph<'a>, x: Var| match drop_rng.as_mut() {
            Some(rng) => dropout_mask(g, x, cfg.dropout, rng),
            None => x,
        };

        let mut x = g.gather(v.tok_emb, token_ids);
        if let Some(p) = prompts.input {
            x = g.concat_rows(&[p, x]);
        }
        let positions: Vec<usize> = (0..x.rows()).collect();
        x = g.add(x, g.gather(v.pos_emb, &positions));
        x = dropout(g, x);

        let dh = cfg.head_dim();
        let inv = 1.0 / (dh as f64).sqrt();
        for (l, b) in v.blocks.iter().enumerate() {
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] = *b;
            let h = g.layer_norm(x, ln1_g, ln1_b);
            let kv = match prompts.layers.as_ref().map(|p| p[l]) {
                Some(p) => g.concat_rows(&[g.layer_norm(p, ln1_g, ln1_b), h]),
                None => h,
            };
            let q = g.linear(h, wq, bq);
            let kk = g.linear(kv, wk, bk);
            let vv = g.linear(kv, wv, bv);
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hh in 0..cfg.n_heads {
                let qh = g.slice_cols(q, hh * dh, dh);
                let kh = g.slice_cols(kk, hh * dh, dh);
                let vh = g.slice_cols(vv, hh * dh, dh);
                let scores = g.scale(g.matmul_nt(qh, kh), inv);
                let attn = g.softmax(scores)?;
                heads.push(g.matmul(attn, vh));
            }
            let att = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
            let att = dropout(g, g.linear(att, wo, bo));
            x = g.add(x, att);
            let h2 = g.layer_norm(x, ln2_g, ln2_b);
            let ff = g.linear(g.gelu(g.linear(h2, w1, b1)), w2, b2);
            x = g.add(x, dropout(g, ff));
        }
        Ok(g.layer_norm(x, v.lnf_g, v.lnf_b))
    }

    /// Cloze-head transform of hidden rows, before the output projection.
    pub fn head_transform<'a>(&self, g: &Graph<'a>, v: &BackboneVars, hidden: Var) -> Var {
        let t = g.gelu(g.linear(hidden, v.head_w, v.head_b));
        g.layer_norm(t, v.head_ln_g, v.head_ln_b)
    }

    /// Full-vocabulary logits for each hidden row.
    pub fn vocab_logits<'a>(&self, g: &Graph<'a>, v: &BackboneVars, hidden: Var) -> Var {
        let t = self.head_transform(g, v, hidden);
        g.add_row(g.matmul_nt(t, v.tok_emb), v.out_bias)
    }

    /// Logits restricted to `token_ids` (one column each) for each hidden row.
    pub fn restricted_logits<'a>(&self, g: &Graph<'a>, v: &BackboneVars, hidden: Var, token_ids: &[usize]) -> Var {
        let t = self.head_transform(g, v, hidden);
        let emb = g.gather(v.tok_emb, token_ids);
        let bias_col = g.reshape(v.out_bias, self.config.vocab_size, 1);
        let bias = g.reshape(g.gather(bias_col, token_ids), 1, token_ids.len());
        g.add_row(g.matmul_nt(t, emb), bias)
    }

    /// Verbalizer logits (`1 × C`) at the mask position.
    pub fn mask_logits<'a>(
        &self,
        g: &Graph<'a>,
        v: &BackboneVars,
        token_ids: &[usize],
        mask_position: usize,
        prompts: &PromptVars,
        verbalizer_ids: &[usize],
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        if mask_position >= token_ids.len() {
            return Err(Error::invalid(format!(
                "mask position {mask_position} outside input of length {}",
                token_ids.len()
            )));
        }
        let hidden = self.encode(g, v, token_ids, prompts, dropout_seed)?;
        let row = g.slice_rows(hidden, prompts.offset() + mask_position, 1);
        Ok(self.restricted_logits(g, v, row, verbalizer_ids))
    }

    /// `(k + n) × |V|` logits for a data-level prompted input.
    pub fn forward_logits(&self, input: &PromptedInput) -> Result<Tensor> {
        let g = Graph::new();
        let v = self.bind(&g);
        let prompts = data_prompts(&g, input);
        let hidden = self.encode(&g, &v, &input.token_ids, &prompts, None)?;
        Ok(g.tensor(self.vocab_logits(&g, &v, hidden)))
    }

    /// Label distribution from a softmax over the verbalizer logits only.
    pub fn classify_ids(&self, input: &PromptedInput, verbalizer_ids: &[usize]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let v = self.bind(&g);
        let prompts = data_prompts(&g, input);
        let logits = self.mask_logits(&g, &v, &input.token_ids, input.mask_position, &prompts, verbalizer_ids, None)?;
        Ok(g.value(g.softmax(logits)?))
    }

    pub fn classify(&self, input: &PromptedInput, spec: &TaskSpec) -> Result<Vec<f64>> {
        let ids = spec.label_token_ids(&self.vocab)?;
        self.classify_ids(input, &ids)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_params(CHECKPOINT_KIND, &self.config, &self.vocab, self.step, &self.params())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Restores a checkpoint. The returned model is frozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: TransformerConfig = ck.config()?;
        let mut model = Self::new(config, ck.vocab.clone(), 0)?;
        ck.restore_into(model.params_mut())?;
        model.step = ck.step;
        model.set_frozen(true);
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn check_width(p: Var, d: usize) -> Result<()> {
    if p.cols() != d {
        return Err(Error::invalid(format!("prefix rows have width {}, expected {d}", p.cols())));
    }
    Ok(())
}

fn data_prompts<'a>(g: &Graph<'a>, input: &'a PromptedInput) -> PromptVars {
    PromptVars {
        input: input.input_soft_prefix.as_ref().map(|t| g.leaf(t, false)),
        layers: input
            .per_layer_prefixes
            .as_ref()
            .map(|ls| ls.iter().map(|t| g.leaf(t, false)).collect()),
    }
}

fn dropout_mask(g: &Graph<'_>, x: Var, rate: f64, rng: &mut SeedRng) -> Var {
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.rows() * x.cols())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    g.mul(x, g.constant(mask, x.rows(), x.cols()))
}
