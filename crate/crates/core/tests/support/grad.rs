//! Gradient checks shared by the gradient suite and the acceptance run.

use std::collections::HashMap;

use ipt_core::backbone::{Backbone, TransformerConfig};
use ipt_core::error::Result;
use ipt_core::prompts::{EncoderKind, PromptBase, PromptTable, Strategy, StrategyConfig, StrategyKind};
use ipt_core::tensor::gradcheck::finite_diff_check_params;
use ipt_core::tensor::{finite_diff_check, init, FiniteDiffReport, Graph, Parameter, Targets, Tensor, Var};
use ipt_core::text::{LabeledInstance, Vocabulary};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;
/// Step for whole-model losses, where some weights have gradients near
/// 1e-8 and a smaller step drowns them in round-off.
const MODEL_H: f64 = 1e-3;

fn values(n: usize, seed: u64) -> Vec<f64> {
    init::normal(&mut init::rng(seed), &[n], 1.0).data().to_vec()
}

fn point(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::new(vec![rows, cols], values(rows * cols, seed))
}

/// Reduces `y` to a scalar with fixed, non-uniform weights so that every
/// output coordinate carries a distinct gradient.
fn weighted<'g>(g: &Graph<'g>, y: Var) -> Var {
    let c = g.constant(values(y.rows() * y.cols(), 99), y.rows(), y.cols());
    g.sum(g.mul(y, c))
}

type Case = (&'static str, Tensor, Box<dyn for<'g> Fn(&Graph<'g>, Var) -> Result<Var>>);

fn case(
    name: &'static str,
    p: Tensor,
    f: impl for<'g> Fn(&Graph<'g>, Var) -> Result<Var> + 'static,
) -> Case {
    (name, p, Box::new(f))
}

fn cases() -> Vec<Case> {
    let k = |r, c, s| move |g: &Graph<'_>| g.constant(values(r * c, s), r, c);
    // well-separated values so max pooling has no near-ties
    let spread = Tensor::new(vec![5, 3], (0..15).map(|i| ((i * 7) % 15) as f64 * 0.3 - 2.0).collect());
    // away from the ReLU kink
    let off_kink = Tensor::new(vec![2, 3], vec![0.7, -0.4, 1.3, -1.1, 0.25, -0.6]);
    vec![
        case("matmul-left", point(3, 4, 1), move |g, x| Ok(weighted(g, g.matmul(x, k(4, 2, 2)(g))))),
        case("matmul-right", point(4, 2, 1), move |g, x| Ok(weighted(g, g.matmul(k(3, 4, 2)(g), x)))),
        case("matmul-nt", point(3, 4, 1), move |g, x| Ok(weighted(g, g.matmul_nt(x, k(5, 4, 2)(g))))),
        case("matmul-tn", point(4, 3, 1), move |g, x| Ok(weighted(g, g.matmul_ex(x, k(4, 2, 2)(g), true, false)))),
        case("matmul-tt", point(4, 3, 1), move |g, x| Ok(weighted(g, g.matmul_ex(x, k(2, 4, 2)(g), true, true)))),
        case("matmul-self", point(3, 3, 1), |g, x| Ok(weighted(g, g.matmul(x, x)))),
        case("add", point(2, 3, 3), move |g, x| Ok(weighted(g, g.add(x, k(2, 3, 4)(g))))),
        case("sub-left", point(2, 3, 3), move |g, x| Ok(weighted(g, g.sub(x, k(2, 3, 4)(g))))),
        case("sub-right", point(2, 3, 3), move |g, x| Ok(weighted(g, g.sub(k(2, 3, 4)(g), x)))),
        case("mul", point(2, 3, 3), move |g, x| Ok(weighted(g, g.mul(x, k(2, 3, 4)(g))))),
        case("mul-self", point(2, 3, 3), |g, x| Ok(weighted(g, g.mul(x, x)))),
        case("scale", point(2, 3, 3), |g, x| Ok(weighted(g, g.scale(x, -1.7)))),
        case("add-row-input", point(3, 4, 5), move |g, x| Ok(weighted(g, g.add_row(x, k(1, 4, 6)(g))))),
        case("add-row-bias", point(1, 4, 5), move |g, x| Ok(weighted(g, g.add_row(k(3, 4, 6)(g), x)))),
        case("linear", point(3, 4, 5), move |g, x| Ok(weighted(g, g.linear(x, k(4, 2, 6)(g), k(1, 2, 7)(g))))),
        case("gather", point(4, 3, 8), |g, x| Ok(weighted(g, g.gather(x, &[2, 0, 2, 3])))),
        case("layer-norm-input", point(3, 5, 9), move |g, x| {
            Ok(weighted(g, g.layer_norm(x, k(1, 5, 10)(g), k(1, 5, 11)(g))))
        }),
        case("layer-norm-gamma", point(1, 5, 9), move |g, x| {
            Ok(weighted(g, g.layer_norm(k(3, 5, 10)(g), x, k(1, 5, 11)(g))))
        }),
        case("layer-norm-beta", point(1, 5, 9), move |g, x| {
            Ok(weighted(g, g.layer_norm(k(3, 5, 10)(g), k(1, 5, 11)(g), x)))
        }),
        case("gelu", point(2, 4, 12), |g, x| Ok(weighted(g, g.gelu(x)))),
        case("relu", off_kink, |g, x| Ok(weighted(g, g.relu(x)))),
        case("tanh", point(2, 4, 12), |g, x| Ok(weighted(g, g.tanh(x)))),
        case("sigmoid", point(2, 4, 12), |g, x| Ok(weighted(g, g.sigmoid(x)))),
        case("softmax", point(3, 4, 13), |g, x| Ok(weighted(g, g.softmax(x)?))),
        case("log-softmax", point(3, 4, 13), |g, x| Ok(weighted(g, g.log_softmax(x)?))),
        case("cross-entropy-index", point(3, 4, 14), |g, x| g.cross_entropy(x, &Targets::Index(vec![1, 3, 0]))),
        case("cross-entropy-dense", point(2, 3, 14), |g, x| {
            g.cross_entropy(x, &Targets::Dense(vec![0.2, 0.5, 0.3, 0.0, 1.0, 0.0]))
        }),
        case("im2col", point(5, 2, 15), |g, x| Ok(weighted(g, g.im2col(x, 3, 1)))),
        case("conv1d", point(6, 3, 15), move |g, x| Ok(weighted(g, g.conv1d(x, k(6, 4, 16)(g), k(1, 4, 17)(g), 2, 1)))),
        case("max-pool1d", spread.clone(), |g, x| Ok(weighted(g, g.max_pool1d(x, 2, 2)))),
        case("adaptive-max-pool", spread, |g, x| Ok(weighted(g, g.adaptive_max_pool(x, 1)))),
        case("concat-rows", point(2, 3, 18), move |g, x| Ok(weighted(g, g.concat_rows(&[x, k(1, 3, 19)(g), x])))),
        case("concat-cols", point(2, 3, 18), move |g, x| Ok(weighted(g, g.concat_cols(&[k(2, 1, 19)(g), x])))),
        case("slice-rows", point(4, 3, 20), |g, x| Ok(weighted(g, g.slice_rows(x, 1, 2)))),
        case("slice-cols", point(3, 4, 20), |g, x| Ok(weighted(g, g.slice_cols(x, 1, 2)))),
        case("transpose", point(2, 3, 21), |g, x| Ok(weighted(g, g.transpose(x)))),
        case("reshape", point(2, 6, 21), |g, x| Ok(weighted(g, g.reshape(x, 3, 4)))),
        case("sum", point(2, 3, 22), |g, x| Ok(g.sum(g.mul(x, x)))),
        case("mean-rows", point(4, 3, 22), |g, x| Ok(weighted(g, g.mean_rows(x)))),
        case("lstm-cell-input", point(1, 3, 23), move |g, x| {
            let (h, c) = g.lstm_cell(x, k(1, 2, 24)(g), k(1, 2, 25)(g), k(3, 8, 26)(g), k(2, 8, 27)(g), k(1, 8, 28)(g));
            Ok(g.add(weighted(g, h), weighted(g, c)))
        }),
        case("lstm-cell-state", point(1, 2, 23), move |g, x| {
            let (h, c) = g.lstm_cell(k(1, 3, 24)(g), x, x, k(3, 8, 26)(g), k(2, 8, 27)(g), k(1, 8, 28)(g));
            Ok(g.add(weighted(g, h), weighted(g, c)))
        }),
        case("lstm-cell-weights", point(3, 8, 23), move |g, x| {
            let (h, c) = g.lstm_cell(k(1, 3, 24)(g), k(1, 2, 25)(g), k(1, 2, 29)(g), x, k(2, 8, 27)(g), k(1, 8, 28)(g));
            Ok(g.add(weighted(g, h), weighted(g, c)))
        }),
    ]
}

/// Ops whose analytic gradient misses the tolerance, with their reports.
pub fn op_failures() -> Vec<String> {
    let mut failures = Vec::new();
    for (name, p, f) in cases() {
        let r = finite_diff_check(|g, x| f(g, x), &p, H);
        if !r.passes(TOL) || r.coordinates != p.len() {
            failures.push(format!("{name}: {r:?}"));
        }
    }
    failures
}

pub fn op_count() -> usize {
    cases().len()
}

struct Mlp {
    params: Vec<Parameter>,
}

impl Mlp {
    fn new() -> Self {
        let mut rng = init::rng(5);
        let shapes: [(&str, &[usize]); 4] = [("w1", &[4, 6]), ("b1", &[6]), ("w2", &[6, 3]), ("b2", &[3])];
        Self {
            params: shapes
                .iter()
                .map(|(n, s)| Parameter::new(*n, init::normal(&mut rng, s, 0.7)))
                .collect(),
        }
    }

    fn loss(&self) -> Result<(f64, HashMap<String, Vec<f64>>)> {
        let g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|p| g.param(p)).collect();
        let x = g.constant(values(5 * 4, 31), 5, 4);
        let h = g.tanh(g.linear(x, p[0], p[1]));
        let logits = g.linear(h, p[2], p[3]);
        let loss = g.cross_entropy(logits, &Targets::Index(vec![0, 2, 1, 1, 0]))?;
        Ok((g.scalar(loss), g.backward(loss)?.by_param()))
    }
}

pub fn mlp_report() -> FiniteDiffReport {
    let mut m = Mlp::new();
    finite_diff_check_params(&mut m, |m| m.params.iter_mut().collect(), |m| m.loss(), 1e-6)
}

fn toy_backbone() -> Backbone {
    let vocab = Vocabulary::build(&["human activities culture and the arts yes no cat dog sat on mat answer :"], 1).unwrap();
    let cfg = TransformerConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ff_dim: 16,
        max_context: 48,
        init_std: 0.3,
        ..Default::default()
    };
    Backbone::new(cfg, vocab, 3).unwrap()
}

fn instance() -> LabeledInstance {
    LabeledInstance {
        id: "x".into(),
        raw_fields: Default::default(),
        token_ids: vec![6, 7, 8, 9, 10, 2],
        label_id: 1,
        mask_position: 5,
    }
}

/// Strategy and backbone together, so both can be perturbed.
struct Model {
    backbone: Backbone,
    strategy: Strategy,
}

fn model_loss(m: &Model) -> Result<(f64, HashMap<String, Vec<f64>>)> {
    let g = Graph::new();
    let inst = instance();
    let logits = m.strategy.logits(&g, &m.backbone, &inst, &[4, 5], None)?;
    let loss = g.cross_entropy(logits, &Targets::Index(vec![inst.label_id]))?;
    Ok((g.scalar(loss), g.backward(loss)?.by_param()))
}

fn configs() -> Vec<StrategyConfig> {
    let base = |kind| StrategyConfig {
        prompt_len: 3,
        encoder_hidden: (kind == StrategyKind::EncoderIpt).then_some(4),
        ..StrategyConfig::new(kind)
    };
    let mut out: Vec<StrategyConfig> = StrategyKind::ALL.iter().map(|&k| base(k)).collect();
    for e in [EncoderKind::Rnn, EncoderKind::Mlp] {
        out.push(StrategyConfig {
            encoder: e,
            ..base(StrategyKind::EncoderIpt)
        });
    }
    out.push(StrategyConfig {
        base: PromptBase::PrefixTuning,
        ..base(StrategyKind::EncoderIpt)
    });
    out
}

fn build(cfg: StrategyConfig, frozen: bool) -> Model {
    let mut backbone = toy_backbone();
    backbone.set_frozen(frozen);
    let table = (cfg.strategy == StrategyKind::PretrainedIpt).then(|| PromptTable {
        table: init::normal(&mut init::rng(4), &[backbone.vocab.len(), 8], 0.5),
    });
    let strategy = Strategy::new(cfg, &backbone, 9, table).unwrap();
    Model { backbone, strategy }
}

/// Strategy variants whose end-to-end loss fails the check.
pub fn strategy_failures() -> Vec<String> {
    let mut failures = Vec::new();
    for cfg in configs() {
        let name = format!("{:?}/{:?}/{:?}", cfg.strategy, cfg.encoder, cfg.base);
        let mut m = build(cfg, true);
        let r = finite_diff_check_params(
            &mut m,
            |m| m.strategy.params_mut().filter(|p| !p.is_frozen()).collect(),
            model_loss,
            MODEL_H,
        );
        if !r.passes(TOL) || r.coordinates != m.strategy.trainable_count() {
            failures.push(format!("{name}: {r:?}"));
        }
    }
    failures
}

pub fn strategy_count() -> usize {
    configs().len()
}

/// With the backbone unfrozen, every backbone weight gets a correct
/// gradient through the prompted forward pass.
pub fn backbone_failures() -> Vec<String> {
    let mut failures = Vec::new();
    for kind in [StrategyKind::TaskPrompt, StrategyKind::Prefix] {
        let mut m = build(
            StrategyConfig {
                prompt_len: 2,
                ..StrategyConfig::new(kind)
            },
            false,
        );
        // a key bias shifts every score in a row equally, so softmax
        // cancels it and its gradient is zero up to round-off
        let r = finite_diff_check_params(
            &mut m,
            |m| m.backbone.params_mut().into_iter().filter(|p| !p.name.ends_with("attn.bk")).collect(),
            model_loss,
            1e-4,
        );
        if !r.passes(TOL) {
            failures.push(format!("{kind}: {r:?}"));
        }
    }
    failures
}
