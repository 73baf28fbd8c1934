//! Embedding analysis: PCA projections, cosine distance statistics and
//! nearest-token case studies.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, PromptVars};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Default number of sentences drawn for a projection.
pub const DEFAULT_SAMPLE: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub category: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub points: Vec<ProjectedPoint>,
    /// Fraction of total variance carried by each component.
    pub explained: [f64; 2],
    /// Unit principal axes, one row per component.
    pub components: [Vec<f64>; 2],
}

fn check_rows(vectors: &[Vec<f64>]) -> Result<usize> {
    let d = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::invalid("vectors have different dimensions"));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("vectors contain non-finite values"));
    }
    Ok(d)
}

/// Projects onto the top two principal components. Each axis is signed so
/// that its largest-magnitude loading is positive (the lower index wins a
/// magnitude tie).
pub fn project_2d(vectors: &[Vec<f64>], ids: &[String], categories: &[String]) -> Result<Projection2D> {
    if vectors.len() < 3 {
        return Err(Error::invalid(format!("projection needs at least 3 vectors, got {}", vectors.len())));
    }
    if ids.len() != vectors.len() || categories.len() != vectors.len() {
        return Err(Error::invalid("one id and one category per vector"));
    }
    let d = check_rows(vectors)?;
    if d < 2 {
        return Err(Error::invalid("projection needs at least 2 dimensions"));
    }
    let n = vectors.len();
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let total = cov.trace();
    if !(total > 1e-300) {
        return Err(Error::invalid("vectors have zero variance (rank 0)"));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |c: usize| -> Vec<f64> {
        let col: Vec<f64> = eig.eigenvectors.column(order[c]).iter().copied().collect();
        let mut lead = 0;
        for (j, v) in col.iter().enumerate() {
            if v.abs() > col[lead].abs() {
                lead = j;
            }
        }
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        col.into_iter().map(|v| v * sign).collect()
    };
    let components = [axis(0), axis(1)];
    let explained = [0, 1].map(|c| eig.eigenvalues[order[c]].max(0.0) / total);
    let points = (0..n)
        .map(|i| {
            let dot = |a: &[f64]| (0..d).map(|j| centered[(i, j)] * a[j]).sum::<f64>();
            ProjectedPoint {
                id: ids[i].clone(),
                category: categories[i].clone(),
                x: dot(&components[0]),
                y: dot(&components[1]),
            }
        })
        .collect();
    Ok(Projection2D {
        points,
        explained,
        components,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 − cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine_similarity(a, b)
}

/// Cosine similarity clamped to `[−1, 1]`; `0` when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let (na, nb) = (sq(a), sq(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // one square root, so identical vectors give exactly 1
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub intra_mean: f64,
    pub inter_mean: f64,
    /// `intra / inter`, defined as 0 when `inter` is 0.
    pub ratio: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

/// Mean pairwise cosine distance within and across categories, over all
/// unordered pairs.
pub fn distance_stats<C: Eq + Hash + Sync>(vectors: &[Vec<f64>], categories: &[C]) -> Result<DistanceStats> {
    if vectors.len() != categories.len() {
        return Err(Error::invalid("one category per vector"));
    }
    check_rows(vectors)?;
    let mut counts: HashMap<&C, usize> = HashMap::new();
    for c in categories {
        *counts.entry(c).or_default() += 1;
    }
    if counts.len() < 2 || counts.values().any(|&n| n < 2) {
        return Err(Error::invalid("distance statistics need at least 2 categories with 2 points each"));
    }
    if vectors.iter().any(|v| norm(v) == 0.0) {
        return Err(Error::invalid("cosine distance is undefined for a zero vector"));
    }
    let n = vectors.len();
    let sums: Vec<(f64, usize, f64, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = (0.0, 0, 0.0, 0);
            for j in i + 1..n {
                let d = cosine_distance(&vectors[i], &vectors[j]);
                if categories[i] == categories[j] {
                    acc.0 += d;
                    acc.1 += 1;
                } else {
                    acc.2 += d;
                    acc.3 += 1;
                }
            }
            acc
        })
        .collect();
    let (intra, ni, inter, nx) = sums
        .iter()
        .fold((0.0, 0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3));
    let intra_mean = intra / ni as f64;
    let inter_mean = inter / nx as f64;
    Ok(DistanceStats {
        intra_mean,
        inter_mean,
        ratio: if inter_mean == 0.0 { 0.0 } else { intra_mean / inter_mean },
        intra_pairs: ni,
        inter_pairs: nx,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub token_id: usize,
    pub token: String,
    pub similarity: f64,
}

/// For each row of `prompts`, the `top_k` reference entries with the
/// highest cosine similarity; ties go to the lower token id. `reference`
/// pairs each candidate token id with its vector.
pub fn nearest_tokens(
    prompts: &Tensor,
    reference: &[(usize, &[f64])],
    top_k: usize,
    token_name: impl Fn(usize) -> String + Sync,
) -> Result<Vec<Vec<Neighbor>>> {
    if reference.is_empty() {
        return Err(Error::invalid("nearest-token reference set is empty"));
    }
    if top_k == 0 {
        return Err(Error::invalid("top_k must be positive"));
    }
    Ok((0..prompts.rows())
        .into_par_iter()
        .map(|r| {
            let row = prompts.row(r);
            let mut scored: Vec<(usize, f64)> = reference.iter().map(|(id, v)| (*id, cosine_similarity(row, v))).collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.dedup_by_key(|s| s.0);
            scored
                .into_iter()
                .take(top_k)
                .map(|(token_id, similarity)| Neighbor {
                    token_id,
                    token: token_name(token_id),
                    similarity,
                })
                .collect()
        })
        .collect())
}

/// Mean of the backbone's final hidden states over the sentence tokens.
pub fn sentence_embedding(backbone: &Backbone, token_ids: &[usize]) -> Result<Vec<f64>> {
    let g = Graph::new();
    let v = backbone.bind(&g);
    let mut ids = token_ids.to_vec();
    ids.truncate(backbone.config.max_context);
    let h = backbone.encode(&g, &v, &ids, &PromptVars::default(), None)?;
    Ok(g.value(g.mean_rows(h)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePromptRow {
    pub row: usize,
    pub nearest_vocab: Neighbor,
    pub nearest_input: Neighbor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudy {
    pub id: String,
    pub tokens: Vec<String>,
    pub gold: String,
    pub predicted: String,
    pub rows: Vec<CasePromptRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyReport {
    pub strategy: String,
    pub cases: Vec<CaseStudy>,
}

impl CaseStudy {
    /// Matches each prompt row against the whole vocabulary and against the
    /// instance's own tokens, using the backbone's token embeddings.
    pub fn build(
        backbone: &Backbone,
        id: &str,
        token_ids: &[usize],
        prompts: &Tensor,
        gold: &str,
        predicted: &str,
    ) -> Result<Self> {
        let emb = backbone.token_embeddings();
        let name = |i: usize| backbone.vocab.token(i).unwrap_or("?").to_string();
        let vocab_ref: Vec<(usize, &[f64])> = (0..emb.rows()).map(|i| (i, emb.row(i))).collect();
        let input_ref: Vec<(usize, &[f64])> = token_ids.iter().map(|&i| (i, emb.row(i))).collect();
        let nv = nearest_tokens(prompts, &vocab_ref, 1, name)?;
        let ni = nearest_tokens(prompts, &input_ref, 1, name)?;
        Ok(Self {
            id: id.to_string(),
            tokens: token_ids.iter().map(|&i| name(i)).collect(),
            gold: gold.to_string(),
            predicted: predicted.to_string(),
            rows: nv
                .into_iter()
                .zip(ni)
                .enumerate()
                .map(|(row, (mut v, mut i))| CasePromptRow {
                    row,
                    nearest_vocab: v.remove(0),
                    nearest_input: i.remove(0),
                })
                .collect(),
        })
    }
}

impl CaseStudyReport {
    /// Each case shows its input with the tokens nearest to some prompt row
    /// in bold, then one table row per prompt row.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("# Case study: {}\n", self.strategy);
        for c in &self.cases {
            let marked: std::collections::HashSet<&str> =
                c.rows.iter().map(|r| r.nearest_input.token.as_str()).collect();
            let text: Vec<String> = c
                .tokens
                .iter()
                .map(|t| if marked.contains(t.as_str()) { format!("**{t}**") } else { t.clone() })
                .collect();
            let _ = write!(
                out,
                "\n## {}\n\n{}\n\ngold: {} | predicted: {}\n\n| prompt row | nearest vocabulary token | cosine | nearest input token | cosine |\n|---:|---|---:|---|---:|\n",
                c.id,
                text.join(" "),
                c.gold,
                c.predicted
            );
            for r in &c.rows {
                let _ = writeln!(
                    out,
                    "| {} | {} | {:.4} | {} | {:.4} |",
                    r.row, r.nearest_vocab.token, r.nearest_vocab.similarity, r.nearest_input.token, r.nearest_input.similarity
                );
            }
        }
        out
    }
}

const PALETTE: [&str; 13] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939", "#843c39",
];

impl Projection2D {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "category", "x", "y"]).map_err(csv_err)?;
        for p in &self.points {
            w.write_record([p.id.clone(), p.category.clone(), p.x.to_string(), p.y.to_string()])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }

    /// A scatter plot with one colour per category, in order of first
    /// appearance.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 480.0, 40.0);
        let mut cats: Vec<&str> = Vec::new();
        for p in &self.points {
            if !cats.contains(&p.category.as_str()) {
                cats.push(&p.category);
            }
        }
        let span = |f: fn(&ProjectedPoint) -> f64| {
            let lo = self.points.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = self.points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            (lo, if hi > lo { hi - lo } else { 1.0 })
        };
        let ((x0, xs), (y0, ys)) = (span(|p| p.x), span(|p| p.y));
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{h}\" viewBox=\"0 0 {} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            w + 220.0,
            w + 220.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{pad}\" y=\"24\" font-family=\"sans-serif\" font-size=\"13\">PC1 {:.1}% / PC2 {:.1}% of variance</text>",
            100.0 * self.explained[0],
            100.0 * self.explained[1]
        );
        for p in &self.points {
            let c = cats.iter().position(|c| *c == p.category).unwrap_or(0);
            let cx = pad + (p.x - x0) / xs * (w - 2.0 * pad);
            let cy = h - pad - (p.y - y0) / ys * (h - 2.0 * pad);
            let _ = writeln!(
                out,
                "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>",
                PALETTE[c % PALETTE.len()]
            );
        }
        for (i, c) in cats.iter().enumerate() {
            let y = pad + 18.0 * i as f64;
            let _ = writeln!(
                out,
                "<circle cx=\"{}\" cy=\"{y}\" r=\"5\" fill=\"{}\"/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
                w + 10.0,
                PALETTE[i % PALETTE.len()],
                w + 20.0,
                y + 4.0,
                xml_escape(c)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::data(format!("csv: {e}"))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests;
