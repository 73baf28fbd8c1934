use super::*;
use crate::backbone::TransformerConfig;
use crate::tensor::gradcheck::finite_diff_check_params;
use crate::tensor::{GradMap, Targets};
use crate::text::Vocabulary;

fn backbone() -> Backbone {
    let vocab = Vocabulary::build(
        &["human activities culture and the arts yes no cat dog sat on mat answer :"],
        1,
    )
    .unwrap();
    let cfg = TransformerConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ff_dim: 16,
        max_context: 64,
        init_std: 0.3,
        ..Default::default()
    };
    let mut b = Backbone::new(cfg, vocab, 11).unwrap();
    b.set_frozen(true);
    b
}

fn instance(ids: &[usize]) -> LabeledInstance {
    LabeledInstance {
        id: format!("i{}", ids.len()),
        raw_fields: Default::default(),
        token_ids: ids.to_vec(),
        label_id: 1,
        mask_position: ids.len() - 1,
    }
}

fn cfg(kind: StrategyKind, k: usize) -> StrategyConfig {
    StrategyConfig {
        prompt_len: k,
        // the budget rule would pick width 1 on this tiny backbone
        encoder_hidden: (kind == StrategyKind::EncoderIpt).then_some(4),
        ..StrategyConfig::new(kind)
    }
}

fn build(c: StrategyConfig, b: &Backbone) -> Strategy {
    let table = (c.strategy == StrategyKind::PretrainedIpt).then(|| PromptTable {
        table: init::normal(&mut init::rng(3), &[b.vocab.len(), 8], 0.5),
    });
    Strategy::new(c, b, 7, table).unwrap()
}

fn rows_of(s: &Strategy, b: &Backbone, ids: &[usize]) -> Tensor {
    s.generate(b, &instance(ids)).unwrap().unwrap().rows
}

fn all_variants() -> Vec<StrategyConfig> {
    let mut out: Vec<StrategyConfig> = StrategyKind::ALL.iter().map(|&k| cfg(k, 3)).collect();
    for e in [EncoderKind::Rnn, EncoderKind::Mlp] {
        out.push(StrategyConfig {
            encoder: e,
            ..cfg(StrategyKind::EncoderIpt, 3)
        });
    }
    out.push(StrategyConfig {
        base: PromptBase::PrefixTuning,
        ..cfg(StrategyKind::RandomIpt, 3)
    });
    out.push(StrategyConfig {
        table_dim: Some(5),
        ..cfg(StrategyKind::RandomIpt, 3)
    });
    out.push(StrategyConfig {
        hard_prefix: Some("Human activities".into()),
        ..cfg(StrategyKind::RandomIpt, 3)
    });
    out
}

fn loss_fn<'b>(b: &'b Backbone, inst: &'b LabeledInstance) -> impl Fn(&Strategy) -> Result<(f64, GradMap)> + 'b {
    move |s: &Strategy| {
        let g = Graph::new();
        let logits = s.logits(&g, b, inst, &[4, 5], None)?;
        let loss = g.cross_entropy(logits, &Targets::Index(vec![inst.label_id]))?;
        Ok((g.scalar(loss), g.backward(loss)?.by_param()))
    }
}

#[test]
fn task_prompt_is_instance_agnostic() {
    let b = backbone();
    let s = build(cfg(StrategyKind::TaskPrompt, 20), &b);
    let a = rows_of(&s, &b, &[4, 5, 6]);
    assert_eq!(a.shape(), &[20, 8]);
    assert_eq!(a, rows_of(&s, &b, &[9, 9, 2]));
}

#[test]
fn random_ipt_lookup_and_cycling() {
    let b = backbone();
    let s = build(cfg(StrategyKind::RandomIpt, 2), &b);
    let table = &s.param("prompt.table").unwrap().tensor;
    let r = rows_of(&s, &b, &[5, 9, 5]);
    assert_eq!(r.row(0), table.row(5));
    assert_eq!(r.row(1), table.row(9));
    let s4 = build(cfg(StrategyKind::RandomIpt, 4), &b);
    let table = &s4.param("prompt.table").unwrap().tensor;
    let r = rows_of(&s4, &b, &[7]);
    for i in 0..4 {
        assert_eq!(r.row(i), table.row(7));
    }
    assert_eq!(lookup_ids(&[1, 2, 3], 7), vec![1, 2, 3, 1, 2, 3, 1]);
}

#[test]
fn duplicated_row_gradient_accumulates() {
    let b = backbone();
    let mut s = build(cfg(StrategyKind::RandomIpt, 3), &b);
    let inst = instance(&[5, 9, 5, 2]);
    let analytic = loss_fn(&b, &inst)(&s).unwrap().1["prompt.table"].clone();
    let d = 8;
    let h = 1e-6;
    for j in 0..d {
        let idx = 5 * d + j;
        let p = s.param_mut("prompt.table").unwrap();
        let orig = p.tensor.data()[idx];
        p.tensor.data_mut()[idx] = orig + h;
        let up = loss_fn(&b, &inst)(&s).unwrap().0;
        s.param_mut("prompt.table").unwrap().tensor.data_mut()[idx] = orig - h;
        let down = loss_fn(&b, &inst)(&s).unwrap().0;
        s.param_mut("prompt.table").unwrap().tensor.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        assert!((numeric - analytic[idx]).abs() < 1e-7 * (1.0 + numeric.abs()));
    }
    // the first and third positions both read row 5
    let g = Graph::new();
    let bb = b.bind(&g);
    let sv = s.bind(&g);
    let rows = s.instance_rows(&g, &sv, &bb, &[5, 9, 5]).unwrap().unwrap();
    let c = g.constant((0..24).map(|i| i as f64).collect(), 3, 8);
    let grads = g.backward(g.sum(g.mul(rows, c))).unwrap().by_param();
    let t = &grads["prompt.table"];
    for j in 0..8 {
        assert_eq!(t[5 * 8 + j], j as f64 + (16 + j) as f64);
        assert_eq!(t[9 * 8 + j], (8 + j) as f64);
    }
}

#[test]
fn every_strategy_passes_gradient_check() {
    let b = backbone();
    let inst = instance(&[6, 7, 8, 9, 10, 2]);
    for c in all_variants() {
        let mut s = build(c.clone(), &b);
        let report = finite_diff_check_params(
            &mut s,
            |s| s.params_mut().filter(|p| !p.is_frozen()).collect(),
            loss_fn(&b, &inst),
            1e-5,
        );
        assert!(report.passes(1e-4), "{:?}: {report:?}", c);
    }
}

#[test]
fn utilization_examples() {
    assert_eq!(utilized_len(0.10, 200), 20);
    assert_eq!(utilized_len(0.002, 100), 1);
    assert_eq!(utilized_len(1.0, 7), 7);
    assert_eq!(utilized_len(0.3, 10), 3);
}

#[test]
fn encoder_table_is_frozen() {
    let b = backbone();
    let mut s = build(cfg(StrategyKind::EncoderIpt, 3), &b);
    let inst = instance(&[6, 7, 8, 2]);
    let (_, grads) = loss_fn(&b, &inst)(&s).unwrap();
    assert!(!grads.contains_key("prompt.table"));
    let table_before = s.param("prompt.table").unwrap().tensor.clone();
    crate::tensor::set_summed_grads(s.params_mut(), &[grads], 1.0);
    assert!(s.param("prompt.table").unwrap().tensor.grad().is_none());
    let mut adam = crate::tensor::Adam::new(crate::tensor::AdamConfig::new(0.1, 0)).unwrap();
    adam.step(s.params_mut());
    assert_eq!(s.param("prompt.table").unwrap().tensor.data(), table_before.data());
    assert_eq!(table_before.data(), b.token_embeddings().data());
}

#[test]
fn hard_prefix_rows() {
    let b = backbone();
    let s = build(cfg(StrategyKind::RandomIpt, 20), &b);
    let inst = instance(&[6, 7, 2]);
    let plain = s.generate(&b, &inst).unwrap().unwrap();
    let prefix = HardTypePrefix::new(CategoryLabel::HumanActivities, &b).unwrap();
    let combined = hard_prefix_apply(&prefix, &plain, &b).unwrap();
    assert_eq!(combined.k(), 22);
    assert_eq!(combined.rows.row(0), b.token_embedding(b.vocab.id("human").unwrap()));
    assert_eq!(combined.rows.row(1), b.token_embedding(b.vocab.id("activities").unwrap()));
    assert_eq!(&combined.rows.data()[2 * 8..], plain.rows.data());

    let with_cfg = build(
        StrategyConfig {
            hard_prefix: Some("Human activities".into()),
            ..cfg(StrategyKind::RandomIpt, 20)
        },
        &b,
    );
    assert_eq!(with_cfg.generate(&b, &inst).unwrap().unwrap().rows, combined.rows);
    assert_eq!(with_cfg.input_prompt_len(), 22);
}

#[test]
fn hard_prefix_errors() {
    let b = backbone();
    let bad = StrategyConfig {
        hard_prefix: Some("Sports".into()),
        ..cfg(StrategyKind::RandomIpt, 4)
    };
    assert!(Strategy::new(bad, &b, 0, None).unwrap_err().is_config());
    let missing = StrategyConfig {
        hard_prefix: Some("Mathematics and logic".into()),
        ..cfg(StrategyKind::RandomIpt, 4)
    };
    assert!(matches!(Strategy::new(missing, &b, 0, None), Err(Error::VocabMismatch(_))));
    let prefix = HardTypePrefix::new(CategoryLabel::HumanActivities, &b).unwrap();
    let big = PromptVectors::new(Tensor::zeros(&[63, 8]), "x", "y").unwrap();
    assert!(matches!(hard_prefix_apply(&prefix, &big, &b), Err(Error::ContextOverflow { .. })));
}

#[test]
fn identity_composition_at_init() {
    let b = backbone();
    let s = build(
        StrategyConfig {
            base: PromptBase::PrefixTuning,
            ..cfg(StrategyKind::RandomIpt, 4)
        },
        &b,
    );
    let inst = instance(&[6, 7, 8, 2]);
    let rows = s.generate(&b, &inst).unwrap().unwrap().rows;
    let pi = s.prompted_input(&b, &inst).unwrap();
    assert!(pi.input_soft_prefix.is_none());
    let layers = pi.per_layer_prefixes.unwrap();
    assert_eq!(layers.len(), 2);
    for l in layers {
        assert_eq!(l.shape(), &[4, 8]);
        assert_eq!(l.data(), rows.data());
    }
    let (_, grads) = loss_fn(&b, &inst)(&s).unwrap();
    assert!(grads.contains_key("prompt.table"));
    assert!(grads.contains_key("prompt.compose.layer0") && grads.contains_key("prompt.compose.layer1"));
}

#[test]
fn trainable_sets() {
    let b = backbone();
    let names = |s: &Strategy| s.trainable_params().iter().map(|p| p.name.clone()).collect::<Vec<_>>();
    assert_eq!(names(&build(cfg(StrategyKind::RandomIpt, 4), &b)), vec!["prompt.table"]);
    let mlp = build(
        StrategyConfig {
            encoder: EncoderKind::Mlp,
            ..cfg(StrategyKind::EncoderIpt, 4)
        },
        &b,
    );
    assert_eq!(
        names(&mlp),
        ["fc0.w", "fc0.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"].map(|n| format!("prompt.encoder.{n}"))
    );
    for c in all_variants() {
        let s = build(c, &b);
        assert!(s.trainable_params().iter().all(|p| !p.name.starts_with("backbone.")));
        let enumerated: usize = s.trainable_params().iter().map(|p| p.shape().iter().product::<usize>()).sum();
        assert_eq!(s.expected_trainable_count(), enumerated, "{}", s.name());
    }
}

#[test]
fn encoder_smaller_than_table_on_default_config() {
    let cfgb = TransformerConfig::default();
    let vocab = Vocabulary::from((0..cfgb.vocab_size).map(|i| format!("x{i}")).collect::<Vec<_>>());
    let b = Backbone::new(cfgb, vocab, 0).unwrap();
    let random = Strategy::new(cfg(StrategyKind::RandomIpt, 20), &b, 0, None).unwrap();
    let prefix = Strategy::new(cfg(StrategyKind::Prefix, 20), &b, 0, None).unwrap();
    for e in [EncoderKind::Cnn, EncoderKind::Rnn, EncoderKind::Mlp] {
        let enc = Strategy::new(
            StrategyConfig {
                encoder: e,
                prompt_len: 20,
                ..StrategyConfig::new(StrategyKind::EncoderIpt)
            },
            &b,
            0,
            None,
        )
        .unwrap();
        assert!(enc.trainable_count() < random.trainable_count());
        assert!(enc.trainable_count() as f64 <= 0.005 * b.num_params() as f64);
        assert!(3 * enc.trainable_count() <= prefix.trainable_count(), "{e}");
    }
}

fn traced_flops(s: &Strategy, b: &Backbone, ids: &[usize]) -> u64 {
    let g = Graph::new();
    let bb = b.bind(&g);
    let sv = s.bind(&g);
    let pv = s.prompt_vars(&g, &sv, &bb, ids).unwrap();
    let h = b.encode(&g, &bb, ids, &pv, None).unwrap();
    b.vocab_logits(&g, &bb, h);
    g.matmul_flops()
}

#[test]
fn flop_counts_match_trace() {
    let b = backbone();
    let ids = [6, 7, 8, 9, 10, 11, 2];
    for c in all_variants() {
        let s = build(c, &b);
        assert_eq!(s.flop_count(&b, ids.len()), traced_flops(&s, &b, &ids), "{}", s.name());
    }
    let random = build(cfg(StrategyKind::RandomIpt, 20), &b);
    let task = build(cfg(StrategyKind::TaskPrompt, 20), &b);
    assert_eq!(random.flop_count(&b, 30), task.flop_count(&b, 30));
}

#[test]
fn instance_sensitivity() {
    let b = backbone();
    for c in all_variants() {
        let s = build(c, &b);
        let inst_a = instance(&[6, 7, 8, 2]);
        let inst_b = instance(&[9, 7, 8, 2]);
        let pa = s.prompted_input(&b, &inst_a).unwrap();
        assert_eq!(pa, s.prompted_input(&b, &inst_a).unwrap(), "{}", s.name());
        let pb = s.prompted_input(&b, &inst_b).unwrap();
        let same = pa.input_soft_prefix == pb.input_soft_prefix && pa.per_layer_prefixes == pb.per_layer_prefixes;
        assert_eq!(same, !s.kind().is_instance_wise(), "{}", s.name());
    }
}

#[test]
fn pretrained_requires_table() {
    let b = backbone();
    assert!(Strategy::new(cfg(StrategyKind::PretrainedIpt, 4), &b, 0, None)
        .unwrap_err()
        .is_config());
    let t = PromptTable {
        table: Tensor::zeros(&[3, 8]),
    };
    assert!(Strategy::new(cfg(StrategyKind::PretrainedIpt, 4), &b, 0, Some(t)).is_err());
}
