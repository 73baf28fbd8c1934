use super::*;
use crate::text::synth::marker_word;
use crate::text::{gen_synth_category_corpus, CategoryCorpusConfig};

fn corpus(per_category: usize) -> (Vec<CategoryExample>, Vocabulary) {
    let cfg = CategoryCorpusConfig {
        per_category,
        background_size: 60,
        ..Default::default()
    };
    let ex = gen_synth_category_corpus(&cfg, 3).unwrap();
    let texts: Vec<&str> = ex.iter().map(|e| e.text.as_str()).collect();
    let vocab = Vocabulary::build(&texts, 1).unwrap();
    (ex, vocab)
}

fn quick() -> ClassifierConfig {
    ClassifierConfig {
        filters: 8,
        epochs: 3,
        ..Default::default()
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

#[test]
fn manifest_labels_every_text_of_a_source() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("news.jsonl"), "{\"text\": \"stocks rise\"}\n\n{\"text\": \"rain today\"}\n").unwrap();
    std::fs::write(dir.path().join("reviews.txt"), "great film\n\nslow plot\n").unwrap();
    let manifest = dir.path().join("manifest.json");
    std::fs::write(
        &manifest,
        r#"{"news.jsonl": "Human activities", "reviews.txt": "Culture and the arts"}"#,
    )
    .unwrap();
    let out = label_corpus_by_description(&manifest).unwrap();
    let got: Vec<(&str, CategoryLabel)> = out.iter().map(|e| (e.text.as_str(), e.category)).collect();
    assert_eq!(
        got,
        vec![
            ("stocks rise", CategoryLabel::HumanActivities),
            ("rain today", CategoryLabel::HumanActivities),
            ("great film", CategoryLabel::CultureAndTheArts),
            ("slow plot", CategoryLabel::CultureAndTheArts),
        ]
    );
}

#[test]
fn empty_manifest_and_unknown_category() {
    let dir = tempfile::tempdir().unwrap();
    assert!(label_sources(&IndexMap::new(), dir.path()).unwrap().is_empty());
    let mut m = IndexMap::new();
    // the category is checked before the (missing) file is read
    m.insert("missing.txt".to_string(), "Sports".to_string());
    let err = label_sources(&m, dir.path()).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("Geography and places"));
}

#[test]
fn single_category_is_rejected() {
    let (ex, vocab) = corpus(10);
    let one: Vec<CategoryExample> = ex.into_iter().filter(|e| e.category == CategoryLabel::HumanActivities).collect();
    assert!(matches!(train_classifier(&one, &vocab, &quick(), 8, 0), Err(Error::Data(_))));
}

#[test]
fn initial_loss_is_uniform_baseline() {
    let (ex, vocab) = corpus(10);
    for arch in [ClassifierArch::Cnn, ClassifierArch::Lstm, ClassifierArch::Mlp] {
        let cfg = ClassifierConfig { arch, epochs: 1, ..quick() };
        let m = train_classifier(&ex, &vocab, &cfg, 8, 0).unwrap();
        assert!((m.init_loss - 13f64.ln()).abs() < 0.05, "{arch:?}: {}", m.init_loss);
    }
}

#[test]
fn marker_corpus_is_learned_and_clusters() {
    let (ex, vocab) = corpus(100);
    let cfg = ClassifierConfig::default();
    let m = train_classifier(&ex, &vocab, &cfg, 16, 1).unwrap();
    assert!(m.holdout_accuracy >= 0.95, "holdout accuracy {}", m.holdout_accuracy);
    for w in m.epoch_losses.windows(2).skip(1) {
        assert!(w[1] <= w[0] + 1e-9, "epoch losses {:?}", m.epoch_losses);
    }

    let emb = m.embedding();
    let markers: Vec<(usize, &[f64])> = (0..13)
        .flat_map(|c| (0..8).map(move |j| (c, marker_word(c, j))))
        .filter_map(|(c, w)| vocab.id(&w).map(|id| (c, emb.row(id))))
        .collect();
    let (mut intra, mut inter) = ((0.0, 0), (0.0, 0));
    for (i, (ca, a)) in markers.iter().enumerate() {
        for (cb, b) in &markers[i + 1..] {
            let d = cosine_distance(a, b);
            if ca == cb {
                intra = (intra.0 + d, intra.1 + 1);
            } else {
                inter = (inter.0 + d, inter.1 + 1);
            }
        }
    }
    let (intra, inter) = (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64);
    assert!(intra < inter, "intra {intra} inter {inter}");
}

#[test]
fn seed_determinism() {
    let (ex, vocab) = corpus(8);
    let a = train_classifier(&ex, &vocab, &quick(), 8, 5).unwrap();
    let b = train_classifier(&ex, &vocab, &quick(), 8, 5).unwrap();
    let c = train_classifier(&ex, &vocab, &quick(), 8, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params(), c.params());
}

#[test]
fn extraction_copies() {
    let (ex, vocab) = corpus(6);
    let m = train_classifier(&ex, &vocab, &quick(), 8, 0).unwrap();
    let before = m.clone();
    let mut t = extract_embedding(&m);
    assert_eq!(t.table.shape(), [vocab.len(), 8]);
    assert_eq!(t.table.max_abs_diff(m.embedding()), 0.0);
    t.table.data_mut()[0] += 1.0;
    assert_eq!(m, before);
}

#[test]
fn pretrained_init_reorders_and_checks_vocab() {
    let (ex, vocab) = corpus(6);
    let m = train_classifier(&ex, &vocab, &quick(), 8, 0).unwrap();
    assert_eq!(pretrained_ipt_init(&m, &vocab).unwrap().table.max_abs_diff(m.embedding()), 0.0);

    let mut reversed: Vec<String> = vocab.tokens().to_vec();
    reversed.reverse();
    let rv = Vocabulary::from(reversed);
    let t = pretrained_ipt_init(&m, &rv).unwrap().table;
    let tok = &vocab.tokens()[7];
    assert_eq!(t.row(rv.id(tok).unwrap()), m.embedding().row(7));

    let mut bigger = vocab.clone();
    bigger.extend(["zzz"]);
    match pretrained_ipt_init(&m, &bigger) {
        Err(Error::VocabMismatch(missing)) => assert_eq!(missing, vec!["zzz".to_string()]),
        other => panic!("expected mismatch, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip() {
    let (ex, vocab) = corpus(6);
    for arch in [ClassifierArch::Cnn, ClassifierArch::Lstm, ClassifierArch::Mlp] {
        let cfg = ClassifierConfig { arch, epochs: 1, ..quick() };
        let m = train_classifier(&ex, &vocab, &cfg, 8, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        m.save(&path).unwrap();
        assert_eq!(TrainedClassifier::load(&path).unwrap(), m);
        assert_eq!(m.predict(&ex[0].text), TrainedClassifier::load(&path).unwrap().predict(&ex[0].text));
    }
}

#[test]
fn config_validation() {
    assert!(ClassifierConfig { filter_widths: vec![], ..Default::default() }.validate().is_err());
    assert!(ClassifierConfig { holdout_frac: 0.0, ..Default::default() }.validate().is_err());
    assert!(ClassifierConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    assert!(serde_json::from_str::<ClassifierConfig>(r#"{"arch": "rnn"}"#).unwrap().arch == ClassifierArch::Lstm);
}
