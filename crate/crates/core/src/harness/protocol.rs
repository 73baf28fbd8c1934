//! Few-shot protocol, multi-seed aggregation, sweeps and parameter reports.

use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Experiment, RunResult, TaskData};
use crate::backbone::{param_count, Backbone};
use crate::error::{Error, Result};
use crate::prompts::{EncoderKind, PromptTable, Strategy, StrategyConfig, StrategyKind};
use crate::tensor::argmax;
use crate::text::{sample_few_shot, Dataset};

/// One point of the few-shot hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct GridPoint {
    pub lr: f64,
    pub prompt_len: usize,
}

impl GridPoint {
    /// `{5e-3, 1e-2} × {10, 20}`.
    pub fn default_grid() -> Vec<GridPoint> {
        [5e-3, 1e-2]
            .into_iter()
            .flat_map(|lr| [10, 20].map(|prompt_len| GridPoint { lr, prompt_len }))
            .collect()
    }

    pub fn apply<'a>(&self, exp: &Experiment<'a>) -> Experiment<'a> {
        let mut e = exp.clone();
        e.train.lr = self.lr;
        e.strategy.prompt_len = self.prompt_len;
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRecord {
    pub config: usize,
    pub fold: usize,
    pub accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub k: usize,
    pub grid: Vec<GridPoint>,
    /// Every cross-validation fit, config-major.
    pub cv: Vec<CvRecord>,
    /// Mean fold accuracy of each grid point.
    pub mean_cv: Vec<f64>,
    /// Index of the winning grid point; ties go to the lower index.
    pub chosen: usize,
    pub cv_fits: usize,
    pub final_fits: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub result: RunResult,
}

/// Samples `2k` examples per label, scores every grid point by mean
/// accuracy over stratified folds of that sample, and retrains the winner
/// on the first `k` per label with early stopping on the second `k`. The
/// undrawn remainder is the test set.
pub fn few_shot_protocol(
    exp: &Experiment,
    dataset: &Dataset,
    k: usize,
    grid: &[GridPoint],
    seed: u64,
) -> Result<FewShotResult> {
    if grid.is_empty() {
        return Err(Error::config("few-shot grid is empty"));
    }
    exp.train.validate()?;
    for p in grid {
        p.apply(exp).build(seed)?;
    }
    let labels = dataset.labels();
    let names = dataset.spec.labels();
    let split = sample_few_shot(&labels, &names, k, seed)?;
    let data_for = |train: &[usize], dev: &[usize], test: &[usize]| TaskData {
        spec: dataset.spec.clone(),
        train: dataset.subset(train),
        dev: dataset.subset(dev),
        test: dataset.subset(test),
    };

    let cells: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|c| (0..split.folds.len()).map(move |f| (c, f)))
        .collect();
    let cv: Vec<CvRecord> = cells
        .par_iter()
        .map(|&(c, f)| {
            let (tr, va) = &split.folds[f];
            let r = grid[c].apply(exp).run(&data_for(tr, va, &[]), seed)?;
            Ok(CvRecord {
                config: c,
                fold: f,
                accuracy: r.best_dev_accuracy,
                best_epoch: r.best_epoch,
            })
        })
        .collect::<Result<_>>()?;
    let mean_cv: Vec<f64> = (0..grid.len())
        .map(|c| {
            let s: Vec<f64> = cv.iter().filter(|r| r.config == c).map(|r| r.accuracy).collect();
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect();
    let chosen = argmax(&mean_cv);
    info!("few-shot: grid point {chosen} wins with cv accuracy {:.4}", mean_cv[chosen]);

    let data = data_for(&split.train, &split.dev, &split.pool);
    let result = grid[chosen].apply(exp).run(&data, seed)?;
    Ok(FewShotResult {
        k,
        grid: grid.to_vec(),
        cv_fits: cv.len(),
        cv,
        mean_cv,
        chosen,
        final_fits: 1,
        train_size: data.train.len(),
        dev_size: data.dev.len(),
        test_size: data.test.len(),
        result,
    })
}

/// Mean and sample standard deviation; needs at least two values.
pub fn mean_sd(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::invalid("need at least two values for a standard deviation"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub rows: Vec<SeedRow>,
    pub mean: f64,
    pub sd: f64,
}

impl SeedReport {
    pub fn from_rows(rows: Vec<SeedRow>) -> Result<Self> {
        let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        let (mean, sd) = mean_sd(&accs)?;
        Ok(Self { rows, mean, sd })
    }
}

/// Runs the experiment once per seed and aggregates test accuracy (dev
/// accuracy when there is no test set).
pub fn multi_seed_report(exp: &Experiment, data: &TaskData, seeds: &[u64]) -> Result<(SeedReport, Vec<RunResult>)> {
    if seeds.len() < 2 {
        return Err(Error::config("multi-seed reports need at least two seeds"));
    }
    let runs: Vec<RunResult> = seeds.par_iter().map(|&s| exp.run(data, s)).collect::<Result<_>>()?;
    let rows = runs
        .iter()
        .map(|r| SeedRow {
            seed: r.seed,
            accuracy: r.test_accuracy.unwrap_or(r.best_dev_accuracy),
        })
        .collect();
    Ok((SeedReport::from_rows(rows)?, runs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    PromptLength,
    UtilizationRate,
    Strategy,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 3] = [Self::PromptLength, Self::UtilizationRate, Self::Strategy];

    pub fn name(self) -> &'static str {
        match self {
            Self::PromptLength => "prompt-length",
            Self::UtilizationRate => "utilization-rate",
            Self::Strategy => "strategy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let allowed: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::config(format!("unknown sweep axis '{s}'; expected one of: {}", allowed.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "value", rename_all = "kebab-case")]
pub enum SweepValue {
    PromptLength(usize),
    UtilizationRate(f64),
    Strategy { kind: StrategyKind, encoder: Option<EncoderKind> },
}

impl SweepValue {
    pub fn apply_to(&self, cfg: &mut StrategyConfig) {
        match *self {
            Self::PromptLength(n) => cfg.prompt_len = n,
            Self::UtilizationRate(r) => cfg.utilization_rate = r,
            Self::Strategy { kind, encoder } => {
                cfg.strategy = kind;
                if let Some(enc) = encoder {
                    cfg.encoder = enc;
                }
            }
        }
    }

    /// Random IPT cells drop the experiment's table so they start from a
    /// random one.
    fn apply<'a>(&self, exp: &Experiment<'a>) -> Experiment<'a> {
        let mut e = exp.clone();
        self.apply_to(&mut e.strategy);
        if e.strategy.strategy == StrategyKind::RandomIpt {
            e.table = None;
        }
        e
    }
}

fn parse_strategy(s: &str) -> Result<SweepValue> {
    let allowed = || {
        let names: Vec<&str> = StrategyKind::ALL.iter().map(|k| k.name()).collect();
        format!("{} (encoder-ipt may take a -cnn, -rnn or -mlp suffix)", names.join(", "))
    };
    let (base, encoder) = match s.strip_prefix("encoder-ipt-") {
        Some(enc) => {
            let e: EncoderKind = serde_json::from_value(serde_json::Value::String(enc.to_string()))
                .map_err(|_| Error::config(format!("unknown strategy '{s}'; expected one of: {}", allowed())))?;
            ("encoder-ipt", Some(e))
        }
        None => (s, None),
    };
    let kind = StrategyKind::ALL
        .into_iter()
        .find(|k| k.name() == base)
        .ok_or_else(|| Error::config(format!("unknown strategy '{s}'; expected one of: {}", allowed())))?;
    Ok(SweepValue::Strategy { kind, encoder })
}

/// Parses axis values. Rates accept fractions (`0.05`) or percentages
/// (`5%`).
pub fn parse_sweep_values(axis: SweepAxis, raw: &[&str]) -> Result<Vec<SweepValue>> {
    if raw.is_empty() {
        return Err(Error::config(format!("no values given for the {} sweep", axis.name())));
    }
    raw.iter()
        .map(|s| {
            let s = s.trim();
            match axis {
                SweepAxis::PromptLength => match s.parse::<usize>() {
                    Ok(n) if n > 0 => Ok(SweepValue::PromptLength(n)),
                    _ => Err(Error::config(format!("prompt length must be a positive integer, got '{s}'"))),
                },
                SweepAxis::UtilizationRate => {
                    let (num, scale) = match s.strip_suffix('%') {
                        Some(p) => (p, 0.01),
                        None => (s, 1.0),
                    };
                    match num.trim().parse::<f64>() {
                        Ok(v) if v * scale > 0.0 && v * scale <= 1.0 => Ok(SweepValue::UtilizationRate(v * scale)),
                        _ => Err(Error::config(format!("utilization rate must lie in (0, 1], got '{s}'"))),
                    }
                }
                SweepAxis::Strategy => parse_strategy(s),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: SweepValue,
    pub label: String,
    pub result: RunResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub const HEADER: &'static str =
        "axis,value,strategy,trainable_params,param_ratio,best_epoch,best_dev_accuracy,test_accuracy,train_accuracy,steps";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for row in &self.rows {
            let r = &row.result;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.axis.name(),
                row.label,
                r.strategy,
                r.trainable_params,
                r.param_ratio,
                r.best_epoch,
                r.best_dev_accuracy,
                r.test_accuracy.map_or(String::new(), |a| a.to_string()),
                r.train_accuracy,
                r.step_losses.len()
            );
        }
        out
    }
}

/// One run per axis value. Every cell is built (and so validated) before
/// any training starts; cells then run in parallel.
pub fn sweep(
    exp: &Experiment,
    data: &TaskData,
    axis: SweepAxis,
    values: &[SweepValue],
    labels: &[String],
    seed: u64,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    if labels.len() != values.len() {
        return Err(Error::invalid("one label per sweep value"));
    }
    exp.train.validate()?;
    let max_len = data.all().map(|i| i.token_ids.len()).max().unwrap_or(0);
    let cells: Vec<Experiment> = values.iter().map(|v| v.apply(exp)).collect();
    for cell in &cells {
        let (bb, s) = cell.build(seed)?;
        s.check_fits(&bb, max_len)?;
    }
    let results: Vec<RunResult> = cells.par_iter().map(|c| c.run(data, seed)).collect::<Result<_>>()?;
    Ok(SweepTable {
        axis,
        rows: values
            .iter()
            .zip(labels)
            .zip(results)
            .map(|((v, l), result)| SweepRow {
                value: v.clone(),
                label: l.clone(),
                result,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub trainable: usize,
    /// Closed-form count.
    pub expected: usize,
    /// `trainable / (backbone + trainable)`; 1 for fine-tuning itself.
    pub ratio_vs_finetune: f64,
    /// `trainable / prefix-tuning trainable` at the same prompt length.
    pub ratio_vs_prefix: f64,
}

impl ParamRow {
    pub fn markdown(rows: &[ParamRow]) -> String {
        let mut out = String::from("| strategy | trainable | closed form | vs fine-tuning | vs prefix |\n|---|---:|---:|---:|---:|\n");
        for r in rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.5} | {:.4} |",
                r.name, r.trainable, r.expected, r.ratio_vs_finetune, r.ratio_vs_prefix
            );
        }
        out
    }
}

/// Trainable counts of full fine-tuning and each configured strategy.
pub fn param_ratio_report(
    backbone: &Backbone,
    configs: &[StrategyConfig],
    table: Option<&PromptTable>,
) -> Result<Vec<ParamRow>> {
    let backbone_count = backbone.num_params();
    let prefix_count = |k: usize| -> Result<usize> {
        let cfg = StrategyConfig {
            prompt_len: k,
            ..StrategyConfig::new(StrategyKind::Prefix)
        };
        Ok(Strategy::new(cfg, backbone, 0, None)?.trainable_count())
    };
    let mut rows = vec![ParamRow {
        name: "fine-tuning".into(),
        trainable: backbone_count,
        expected: param_count(&backbone.config),
        ratio_vs_finetune: 1.0,
        ratio_vs_prefix: backbone_count as f64 / prefix_count(StrategyConfig::default().prompt_len)? as f64,
    }];
    for cfg in configs {
        let s = Strategy::new(cfg.clone(), backbone, 0, table.cloned())?;
        let n = s.trainable_count();
        rows.push(ParamRow {
            name: s.name(),
            trainable: n,
            expected: s.expected_trainable_count(),
            ratio_vs_finetune: n as f64 / (backbone_count + n) as f64,
            ratio_vs_prefix: n as f64 / prefix_count(cfg.prompt_len)? as f64,
        });
    }
    Ok(rows)
}
