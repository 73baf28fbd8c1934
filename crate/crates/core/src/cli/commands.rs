use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::LoadedConfig;
use super::lab::Lab;
use super::{Command, Outputs, RunManifest};
use crate::analysis::{distance_stats, project_2d, sentence_embedding, CaseStudy, CaseStudyReport, DistanceStats};
use crate::backbone::{masked_accuracy, Backbone};
use crate::error::{Error, Result};
use crate::harness::{
    evaluate, few_shot_protocol, mean_sd, sweep, train_downstream, Experiment, FewShotResult, RunResult, SweepTable,
    TaskData,
};
use crate::knowledge::{train_classifier, TrainedClassifier};
use crate::prompts::{StrategyConfig, StrategyKind};
use crate::tensor::{init, Tensor};
use crate::text::synth::trigger_mlm_sentences;
use crate::text::{gen_synth_category_corpus, CategoryExample, CategoryCorpusConfig, CategoryLabel, Dataset, TaskSpec};

pub(super) fn dispatch(cmd: &Command, loaded: &LoadedConfig) -> Result<Outputs> {
    if let Command::Report { runs } = cmd {
        return report(runs);
    }
    let lab = Lab::new(loaded);
    lab.check_paths()?;
    match cmd {
        Command::GenData => gen_data(&lab),
        Command::PretrainBackbone => pretrain_backbone(&lab),
        Command::PretrainPrompts => pretrain_prompts(&lab),
        Command::Train => train(&lab),
        Command::FewShot => few_shot(&lab),
        Command::Sweep => run_sweep(&lab),
        Command::Analyze => analyze(&lab),
        Command::Report { .. } => unreachable!("handled above"),
    }
}

/// Everything a command needs short of a pretrained backbone.
struct Setup {
    spec: TaskSpec,
    corpus: Vec<CategoryExample>,
    mlm: Vec<String>,
    backbone: Backbone,
    needs_pretrain: bool,
    dataset: Dataset,
}

impl Setup {
    fn new(lab: &Lab) -> Result<Self> {
        let (spec, raws) = lab.task()?;
        let corpus = lab.corpus()?;
        let mlm = lab.mlm_corpus(&raws, &corpus)?;
        let vocab = lab.vocabulary(&spec, &raws, &mlm)?;
        let (backbone, needs_pretrain) = lab.backbone(vocab)?;
        let dataset = Dataset::encode(spec.clone(), &raws, &backbone.vocab)?;
        Ok(Self {
            spec,
            corpus,
            mlm,
            backbone,
            needs_pretrain,
            dataset,
        })
    }

    /// Pretrains the backbone if needed, then freezes it.
    fn ready(&mut self, lab: &Lab) -> Result<()> {
        if self.needs_pretrain {
            lab.pretrain(&mut self.backbone, &self.mlm)?;
            self.needs_pretrain = false;
        }
        self.backbone.set_frozen(true);
        Ok(())
    }
}

fn seed(lab: &Lab) -> u64 {
    lab.loaded.config.seed
}

fn gen_data(lab: &Lab) -> Result<Outputs> {
    let (spec, raws) = lab.task()?;
    let corpus = lab.corpus()?;
    let mlm = lab.mlm_corpus(&raws, &corpus)?;
    let records: Vec<serde_json::Map<String, Value>> = raws
        .iter()
        .map(|r| {
            let mut m = serde_json::Map::new();
            m.insert("id".into(), json!(r.id));
            for (k, v) in &r.fields {
                m.insert(k.clone(), json!(v));
            }
            m.insert(spec.label_field.clone(), json!(r.label));
            m
        })
        .collect();

    let mut out = Outputs::default();
    out.jsonl("task.jsonl", &records)?;
    out.json("task_spec.json", &spec)?;
    let mut manifest = serde_json::Map::new();
    for c in CategoryLabel::ALL {
        let texts: Vec<&str> = corpus.iter().filter(|e| e.category == c).map(|e| e.text.as_str()).collect();
        if texts.is_empty() {
            continue;
        }
        let file = format!("corpus/cat{:02}.txt", c.index());
        out.text(&file, texts.join("\n") + "\n");
        manifest.insert(file.trim_start_matches("corpus/").to_string(), json!(c.name()));
    }
    out.json("corpus/manifest.json", &manifest)?;
    out.text("mlm.txt", mlm.join("\n") + "\n");
    let counts = [
        ("task.jsonl", records.len()),
        ("corpus", corpus.len()),
        ("mlm.txt", mlm.len()),
    ];
    let rows: Vec<Value> = counts.iter().map(|(a, n)| json!({"artifact": a, "rows": n})).collect();
    out.jsonl("metrics.jsonl", &rows)?;
    Ok(out)
}

fn pretrain_backbone(lab: &Lab) -> Result<Outputs> {
    let mut s = Setup::new(lab)?;
    let report = lab.pretrain(&mut s.backbone, &s.mlm)?;
    let cfg = &lab.loaded.config;
    let heldout = match cfg.data.task_files {
        Some(_) => s.mlm.iter().take(200).cloned().collect(),
        None => trigger_mlm_sentences(&cfg.data.task, 200, init::derive_seed(cfg.seed, "heldout"))?,
    };
    let acc = masked_accuracy(&s.backbone, &heldout, cfg.backbone.mlm.mask_rate, cfg.seed)?;
    let tail = &report.losses[report.losses.len().saturating_sub(20)..];
    let final_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };

    let mut out = Outputs::default();
    out.json("backbone.json", &s.backbone.to_checkpoint()?)?;
    let rows: Vec<Value> = report
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| json!({"step": i + 1, "loss": l}))
        .collect();
    out.jsonl("metrics.jsonl", &rows)?;
    out.json(
        "result.json",
        &json!({
            "params": s.backbone.num_params(),
            "vocab_size": s.backbone.vocab.len(),
            "digest": s.backbone.digest(),
            "steps": report.losses.len(),
            "final_loss": final_loss,
            "heldout_masked_accuracy": acc,
        }),
    )?;
    Ok(out)
}

/// Marker-token rows of `table` with their category ids, for synthetic
/// corpora only.
fn marker_rows(lab: &Lab, table: &Tensor, vocab: &crate::text::Vocabulary) -> Result<Option<(Vec<Vec<f64>>, Vec<usize>)>> {
    let d = &lab.loaded.config.data;
    if d.corpus_manifest.is_some() {
        return Ok(None);
    }
    let mut rows = Vec::new();
    let mut cats = Vec::new();
    for (c, set) in d.corpus.marker_sets()?.iter().enumerate() {
        for w in set {
            if let Some(id) = vocab.id(w) {
                rows.push(table.row(id).to_vec());
                cats.push(c);
            }
        }
    }
    Ok(Some((rows, cats)))
}

fn pretrain_prompts(lab: &Lab) -> Result<Outputs> {
    let s = Setup::new(lab)?;
    let cfg = &lab.loaded.config;
    let clf = train_classifier(&s.corpus, &s.backbone.vocab, &cfg.classifier.config, s.backbone.d_model(), cfg.seed)?;
    let markers = match marker_rows(lab, clf.embedding(), &clf.vocab)? {
        Some((rows, cats)) => Some(distance_stats(&rows, &cats)?),
        None => None,
    };

    let mut out = Outputs::default();
    out.json("classifier.json", &clf.to_checkpoint()?)?;
    let rows: Vec<Value> = clf
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, l)| json!({"epoch": i + 1, "loss": l}))
        .collect();
    out.jsonl("metrics.jsonl", &rows)?;
    out.json(
        "result.json",
        &json!({
            "arch": clf.config.arch,
            "embed_dim": clf.embed_dim,
            "vocab_size": clf.vocab.len(),
            "init_loss": clf.init_loss,
            "uniform_loss": (CategoryLabel::COUNT as f64).ln(),
            "holdout_accuracy": clf.holdout_accuracy,
            "marker_distance": markers,
        }),
    )?;
    Ok(out)
}

fn experiment<'a>(lab: &Lab, s: &'a Setup, strategy: &StrategyConfig, need_table: bool) -> Result<Experiment<'a>> {
    let table = if need_table {
        let cfg = StrategyConfig {
            strategy: StrategyKind::PretrainedIpt,
            ..strategy.clone()
        };
        lab.table(&s.backbone, &s.corpus, &cfg)?
    } else {
        None
    };
    Ok(Experiment {
        backbone: &s.backbone,
        strategy: strategy.clone(),
        table,
        train: lab.loaded.config.train.clone(),
    })
}

fn split(lab: &Lab, s: &Setup) -> Result<TaskData> {
    let d = &lab.loaded.config.data;
    TaskData::split(&s.dataset, d.dev_frac, d.test_frac, seed(lab))
}

fn train(lab: &Lab) -> Result<Outputs> {
    let mut s = Setup::new(lab)?;
    let strategy = lab.loaded.config.strategy.clone();
    lab.check_strategies(&s.backbone, &s.dataset, std::slice::from_ref(&strategy))?;
    s.ready(lab)?;
    let exp = experiment(lab, &s, &strategy, strategy.strategy == StrategyKind::PretrainedIpt)?;
    let r = exp.run(&split(lab, &s)?, seed(lab))?;

    let mut out = Outputs::default();
    out.jsonl("metrics.jsonl", &r.epochs)?;
    out.json("result.json", &r)?;
    Ok(out)
}

fn few_shot(lab: &Lab) -> Result<Outputs> {
    let mut s = Setup::new(lab)?;
    let cfg = &lab.loaded.config;
    let configs: Vec<StrategyConfig> = cfg
        .few_shot
        .grid
        .iter()
        .map(|p| StrategyConfig {
            prompt_len: p.prompt_len,
            ..cfg.strategy.clone()
        })
        .collect();
    lab.check_strategies(&s.backbone, &s.dataset, &configs)?;
    s.ready(lab)?;
    let exp = experiment(lab, &s, &cfg.strategy, cfg.strategy.strategy == StrategyKind::PretrainedIpt)?;
    let r = few_shot_protocol(&exp, &s.dataset, cfg.few_shot.k, &cfg.few_shot.grid, cfg.seed)?;

    let mut rows: Vec<Value> = r.cv.iter().map(|c| tagged("cv", c)).collect::<Result<_>>()?;
    for e in &r.result.epochs {
        rows.push(tagged("final", e)?);
    }
    let mut out = Outputs::default();
    out.jsonl("metrics.jsonl", &rows)?;
    out.json("result.json", &r)?;
    Ok(out)
}

fn tagged<T: Serialize>(kind: &str, value: &T) -> Result<Value> {
    let mut v = serde_json::to_value(value)?;
    if let Value::Object(m) = &mut v {
        m.insert("kind".into(), json!(kind));
    }
    Ok(v)
}

fn run_sweep(lab: &Lab) -> Result<Outputs> {
    let cfg = &lab.loaded.config;
    let (axis, values, labels) = cfg.sweep_plan()?;
    let mut s = Setup::new(lab)?;
    let configs: Vec<StrategyConfig> = values
        .iter()
        .map(|v| {
            let mut c = cfg.strategy.clone();
            v.apply_to(&mut c);
            c
        })
        .collect();
    lab.check_strategies(&s.backbone, &s.dataset, &configs)?;
    s.ready(lab)?;
    let need_table = configs.iter().any(|c| c.strategy == StrategyKind::PretrainedIpt);
    let exp = experiment(lab, &s, &cfg.strategy, need_table)?;
    let table = sweep(&exp, &split(lab, &s)?, axis, &values, &labels, cfg.seed)?;

    let rows: Vec<Value> = table
        .rows
        .iter()
        .map(|row| {
            let r = &row.result;
            json!({
                "axis": axis.name(),
                "value": row.label,
                "strategy": r.strategy,
                "trainable_params": r.trainable_params,
                "best_epoch": r.best_epoch,
                "best_dev_accuracy": r.best_dev_accuracy,
                "test_accuracy": r.test_accuracy,
                "train_accuracy": r.train_accuracy,
            })
        })
        .collect();
    let mut out = Outputs::default();
    out.text("sweep.csv", table.to_csv());
    out.jsonl("metrics.jsonl", &rows)?;
    out.json("result.json", &table)?;
    Ok(out)
}

/// Fresh sentences for the projection, not used in training.
fn analysis_sample(lab: &Lab, corpus: &[CategoryExample]) -> Result<Vec<CategoryExample>> {
    let cfg = &lab.loaded.config;
    let n = cfg.analysis.sample;
    let mut rng = init::rng(init::derive_seed(cfg.seed, "analysis-sample"));
    let mut pool = match cfg.data.corpus_manifest {
        Some(_) => corpus.to_vec(),
        None => {
            let c = CategoryCorpusConfig {
                per_category: n.div_ceil(CategoryLabel::COUNT),
                ..cfg.data.corpus.clone()
            };
            gen_synth_category_corpus(&c, init::derive_seed(cfg.seed, "analysis-corpus"))?
        }
    };
    pool.shuffle(&mut rng);
    pool.truncate(n);
    Ok(pool)
}

/// Mean classifier embedding over a text's tokens.
fn prompt_side_embedding(clf: &TrainedClassifier, text: &str) -> Vec<f64> {
    let ids = clf.vocab.encode(text);
    let emb = clf.embedding();
    let mut v = vec![0.0; emb.cols()];
    for &i in &ids {
        for (a, b) in v.iter_mut().zip(emb.row(i)) {
            *a += b;
        }
    }
    let n = ids.len().max(1) as f64;
    v.iter().map(|x| x / n).collect()
}

fn analyze(lab: &Lab) -> Result<Outputs> {
    let mut s = Setup::new(lab)?;
    let cfg = &lab.loaded.config;
    let strategy = cfg.strategy.clone();
    lab.check_strategies(&s.backbone, &s.dataset, std::slice::from_ref(&strategy))?;
    if cfg.analysis.sample < 3 {
        return Err(Error::config("analysis.sample must be at least 3"));
    }
    s.ready(lab)?;
    let clf = lab.classifier(&s.backbone, &s.corpus)?;
    let mut out = Outputs::default();
    let mut metrics: Vec<Value> = Vec::new();

    let sample = analysis_sample(lab, &s.corpus)?;
    let ids: Vec<String> = (0..sample.len()).map(|i| format!("s{i:05}")).collect();
    let cats: Vec<String> = sample.iter().map(|e| e.category.name().to_string()).collect();
    let bb = &s.backbone;
    let backbone_vecs: Vec<Vec<f64>> = sample
        .par_iter()
        .map(|e| sentence_embedding(bb, &bb.vocab.encode(&e.text)))
        .collect::<Result<_>>()?;
    let prompt_vecs: Vec<Vec<f64>> = sample.iter().map(|e| prompt_side_embedding(&clf, &e.text)).collect();
    let mut explained = BTreeMap::new();
    let mut sentence_distance = BTreeMap::new();
    for (name, vecs) in [("backbone", &backbone_vecs), ("prompt", &prompt_vecs)] {
        let p = project_2d(vecs, &ids, &cats)?;
        out.text(&format!("projection_{name}.csv"), p.to_csv()?);
        out.text(&format!("projection_{name}.svg"), p.to_svg());
        explained.insert(name, p.explained);
        let d = distance_stats(vecs, &cats)?;
        metrics.push(json!({"statistic": format!("sentence_distance_{name}"), "ratio": d.ratio, "intra": d.intra_mean, "inter": d.inter_mean}));
        sentence_distance.insert(name, d);
    }

    let mut marker = None;
    let mut random: Vec<DistanceStats> = Vec::new();
    if let Some((rows, mcats)) = marker_rows(lab, clf.embedding(), &clf.vocab)? {
        let m = distance_stats(&rows, &mcats)?;
        metrics.push(json!({"statistic": "marker_distance_pretrained", "ratio": m.ratio, "intra": m.intra_mean, "inter": m.inter_mean}));
        marker = Some(m);
        for r in 0..cfg.analysis.random_seeds {
            let mut rng = init::rng(init::derive_seed(cfg.seed, &format!("random-table-{r}")));
            let t = init::normal(&mut rng, &[rows.len(), clf.embed_dim], 1.0);
            let vecs: Vec<Vec<f64>> = (0..rows.len()).map(|i| t.row(i).to_vec()).collect();
            let d = distance_stats(&vecs, &mcats)?;
            metrics.push(json!({"statistic": format!("marker_distance_random_{r}"), "ratio": d.ratio, "intra": d.intra_mean, "inter": d.inter_mean}));
            random.push(d);
        }
    }
    let random_mean_ratio = (!random.is_empty()).then(|| random.iter().map(|d| d.ratio).sum::<f64>() / random.len() as f64);

    let report = case_study(lab, &s, &strategy)?;
    out.text("case_study.md", report.to_markdown());
    out.jsonl("metrics.jsonl", &metrics)?;
    out.json(
        "result.json",
        &json!({
            "sample": sample.len(),
            "explained_variance": explained,
            "sentence_distance": sentence_distance,
            "marker_distance_pretrained": marker,
            "marker_distance_random": random,
            "random_mean_ratio": random_mean_ratio,
            "case_study": report,
        }),
    )?;
    Ok(out)
}

/// Trains the configured strategy and describes its prompts on the first
/// test instances.
fn case_study(lab: &Lab, s: &Setup, strategy: &StrategyConfig) -> Result<CaseStudyReport> {
    let cfg = &lab.loaded.config;
    let exp = experiment(lab, s, strategy, strategy.strategy == StrategyKind::PretrainedIpt)?;
    let data = split(lab, s)?;
    let (mut bb, mut st) = exp.build(cfg.seed)?;
    train_downstream(&mut bb, &mut st, &data, &crate::harness::TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    })?;
    let verbalizer = s.spec.label_token_ids(&bb.vocab)?;
    let labels = s.spec.labels();
    let mut cases = Vec::new();
    for inst in data.test.iter().take(cfg.analysis.cases) {
        let rows = match st.generate(&bb, inst)? {
            Some(pv) => pv.rows,
            None => st.params()[0].tensor.clone(),
        };
        let pred = evaluate(&bb, &st, std::slice::from_ref(inst), &verbalizer)?.predictions[0];
        cases.push(CaseStudy::build(&bb, &inst.id, &inst.token_ids, &rows, labels[inst.label_id], labels[pred])?);
    }
    Ok(CaseStudyReport {
        strategy: st.name(),
        cases,
    })
}

/// One line of the comparison table.
#[derive(Debug, Clone, Serialize)]
struct ReportRow {
    run: String,
    command: String,
    setting: String,
    strategy: String,
    seed: u64,
    trainable_params: usize,
    param_ratio: f64,
    best_dev_accuracy: f64,
    test_accuracy: Option<f64>,
}

fn report_row(run: &Path, m: &RunManifest, setting: &str, r: &RunResult) -> ReportRow {
    ReportRow {
        run: run.display().to_string(),
        command: m.command.clone(),
        setting: setting.to_string(),
        strategy: r.strategy.clone(),
        seed: m.seed,
        trainable_params: r.trainable_params,
        param_ratio: r.param_ratio,
        best_dev_accuracy: r.best_dev_accuracy,
        test_accuracy: r.test_accuracy,
    }
}

fn report(runs: &[PathBuf]) -> Result<Outputs> {
    let mut rows = Vec::new();
    let mut other = Vec::new();
    for dir in runs {
        let m = RunManifest::load(dir).map_err(|e| Error::config(format!("{} is not a run directory: {e}", dir.display())))?;
        let result = dir.join("result.json");
        match m.command.as_str() {
            "train" => {
                let r: RunResult = crate::io::read_json(&result)?;
                rows.push(report_row(dir, &m, "", &r));
            }
            "few-shot" => {
                let f: FewShotResult = crate::io::read_json(&result)?;
                let g = f.grid[f.chosen];
                rows.push(report_row(dir, &m, &format!("k={} lr={} L={}", f.k, g.lr, g.prompt_len), &f.result));
            }
            "sweep" => {
                let t: SweepTable = crate::io::read_json(&result)?;
                for row in &t.rows {
                    rows.push(report_row(dir, &m, &format!("{}={}", t.axis.name(), row.label), &row.result));
                }
            }
            _ => other.push((dir.display().to_string(), m.command.clone())),
        }
    }

    let fmt_acc = |a: Option<f64>| a.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
    let mut md = String::from("# Run comparison\n\n");
    md.push_str("| run | command | setting | strategy | seed | trainable params | ratio vs fine-tuning | best dev acc | test acc |\n");
    md.push_str("|---|---|---|---|---:|---:|---:|---:|---:|\n");
    for r in &rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {:.5} | {:.2} | {} |",
            r.run,
            r.command,
            if r.setting.is_empty() { "-" } else { &r.setting },
            r.strategy,
            r.seed,
            r.trainable_params,
            r.param_ratio,
            100.0 * r.best_dev_accuracy,
            fmt_acc(r.test_accuracy)
        );
    }

    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.command != "sweep") {
        if let Some(a) = r.test_accuracy {
            groups.entry((r.command.clone(), r.strategy.clone())).or_default().push(a);
        }
    }
    if !groups.is_empty() {
        md.push_str("\n## Test accuracy by strategy\n\n| command | strategy | runs | mean | sd |\n|---|---|---:|---:|---:|\n");
        for ((cmd, strategy), accs) in &groups {
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let sd = mean_sd(accs).map_or("-".to_string(), |(_, sd)| format!("{:.2}", 100.0 * sd));
            let _ = writeln!(md, "| {cmd} | {strategy} | {} | {:.2} | {sd} |", accs.len(), 100.0 * mean);
        }
    }
    if !other.is_empty() {
        md.push_str("\n## Other runs\n\n");
        for (run, cmd) in &other {
            let _ = writeln!(md, "- {run}: {cmd}");
        }
    }

    let mut out = Outputs::default();
    out.text("report.md", md);
    out.jsonl("metrics.jsonl", &rows)?;
    Ok(out)
}
