use nalgebra::DMatrix;
use proptest::prelude::*;

use super::*;
use crate::tensor::init;

fn names(n: usize, prefix: &str) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let t = init::normal(&mut init::rng(seed), &[n, d], 1.0);
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

/// Explained-variance fractions from the singular values of the centred
/// data matrix.
fn svd_explained(vectors: &[Vec<f64>]) -> Vec<f64> {
    let (n, d) = (vectors.len(), vectors[0].len());
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let m = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let mut s: Vec<f64> = m.svd(false, false).singular_values.iter().map(|v| v * v).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = s.iter().sum();
    s.iter().map(|v| v / total).collect()
}

#[test]
fn explained_variance_matches_svd_oracle() {
    for seed in 0..4 {
        let v = random_vectors(30, 6, seed);
        let p = project_2d(&v, &names(30, "p"), &names(30, "c")).unwrap();
        let oracle = svd_explained(&v);
        assert!((p.explained[0] - oracle[0]).abs() < 1e-8);
        assert!((p.explained[1] - oracle[1]).abs() < 1e-8);
    }
}

#[test]
fn planar_points_reconstruct_exactly() {
    let a = [1.0, 2.0, 0.0, -1.0, 0.5];
    let b = [0.0, 1.0, 3.0, 1.0, -2.0];
    let coeffs = random_vectors(12, 2, 5);
    let v: Vec<Vec<f64>> = coeffs
        .iter()
        .map(|c| (0..5).map(|j| 0.3 + c[0] * a[j] + c[1] * b[j]).collect())
        .collect();
    let p = project_2d(&v, &names(12, "p"), &names(12, "c")).unwrap();
    assert!((p.explained[0] + p.explained[1] - 1.0).abs() < 1e-12);
    let mean: Vec<f64> = (0..5).map(|j| v.iter().map(|x| x[j]).sum::<f64>() / 12.0).collect();
    for (pt, orig) in p.points.iter().zip(&v) {
        for j in 0..5 {
            let rec = mean[j] + pt.x * p.components[0][j] + pt.y * p.components[1][j];
            assert!((rec - orig[j]).abs() < 1e-10);
        }
    }
}

#[test]
fn sign_convention_and_duplicates() {
    let v = random_vectors(10, 4, 1);
    let p = project_2d(&v, &names(10, "p"), &names(10, "c")).unwrap();
    for c in &p.components {
        let lead = c.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(lead > 0.0);
    }
    let doubled: Vec<Vec<f64>> = v.iter().chain(&v).cloned().collect();
    let q = project_2d(&doubled, &names(20, "p"), &names(20, "c")).unwrap();
    for i in 0..10 {
        assert!((q.points[i].x - q.points[i + 10].x).abs() < 1e-12);
        assert!((q.points[i].x - p.points[i].x).abs() < 1e-9);
        assert!((q.points[i].y - p.points[i].y).abs() < 1e-9);
    }
}

#[test]
fn projection_errors() {
    let same = vec![vec![1.0, 2.0]; 4];
    assert!(project_2d(&same, &names(4, "p"), &names(4, "c")).is_err());
    assert!(project_2d(&random_vectors(2, 3, 0), &names(2, "p"), &names(2, "c")).is_err());
    assert!(project_2d(&random_vectors(5, 1, 0), &names(5, "p"), &names(5, "c")).is_err());
}

proptest! {
    #[test]
    fn projection_ignores_input_order(seed in 0u64..1000, rot in 1usize..9) {
        let v = random_vectors(9, 4, seed);
        let ids = names(9, "p");
        let p = project_2d(&v, &ids, &names(9, "c")).unwrap();
        let mut idx: Vec<usize> = (0..9).collect();
        idx.rotate_left(rot);
        let v2: Vec<Vec<f64>> = idx.iter().map(|&i| v[i].clone()).collect();
        let ids2: Vec<String> = idx.iter().map(|&i| ids[i].clone()).collect();
        let q = project_2d(&v2, &ids2, &names(9, "c")).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            prop_assert!((q.points[k].x - p.points[i].x).abs() < 1e-8);
            prop_assert!((q.points[k].y - p.points[i].y).abs() < 1e-8);
        }
    }

    #[test]
    fn distance_stats_match_all_pairs_oracle(seed in 0u64..1000, n in 4usize..14) {
        let v = random_vectors(n, 3, seed);
        let cats: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let s = distance_stats(&v, &cats).unwrap();
        // ordered pairs, each unordered pair counted twice
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dot: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
                let d = 1.0 - dot / (v[i].iter().map(|x| x * x).sum::<f64>().sqrt() * v[j].iter().map(|x| x * x).sum::<f64>().sqrt());
                if cats[i] == cats[j] { intra += d; ni += 1; } else { inter += d; nx += 1; }
            }
        }
        prop_assert_eq!(s.intra_pairs * 2, ni);
        prop_assert_eq!(s.inter_pairs * 2, nx);
        prop_assert!((s.intra_mean - intra / ni as f64).abs() < 1e-12);
        prop_assert!((s.inter_mean - inter / nx as f64).abs() < 1e-12);
    }

    #[test]
    fn nearest_matches_exhaustive_scan(seed in 0u64..1000) {
        let refs = random_vectors(15, 4, seed);
        let prompts = init::normal(&mut init::rng(seed + 1), &[3, 4], 1.0);
        let reference: Vec<(usize, &[f64])> = refs.iter().enumerate().map(|(i, v)| (i, v.as_slice())).collect();
        let got = nearest_tokens(&prompts, &reference, 2, |i| format!("t{i}")).unwrap();
        for r in 0..3 {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, v) in refs.iter().enumerate() {
                let s = cosine_similarity(prompts.row(r), v);
                if s > best.1 { best = (i, s); }
            }
            prop_assert_eq!(got[r][0].token_id, best.0);
            prop_assert_eq!(got[r][0].similarity, best.1);
            prop_assert!(got[r][1].similarity <= got[r][0].similarity);
            prop_assert!(got[r].iter().all(|n| (-1.0..=1.0).contains(&n.similarity)));
        }
    }
}

#[test]
fn distance_stats_constructions() {
    let mut v = Vec::new();
    let mut cats = Vec::new();
    for i in 0..5 {
        let e = 1e-6 * i as f64;
        v.push(vec![1.0, e, 0.0]);
        cats.push("a");
        v.push(vec![e, 0.0, 1.0]);
        cats.push("b");
    }
    let s = distance_stats(&v, &cats).unwrap();
    assert!(s.intra_mean < 1e-9);
    assert!((s.inter_mean - 1.0).abs() < 1e-5);
    assert!(s.ratio < 1e-8);

    let same = vec![vec![1.0, 1.0]; 4];
    let s = distance_stats(&same, &[0, 0, 1, 1]).unwrap();
    assert_eq!((s.intra_mean, s.inter_mean, s.ratio), (0.0, 0.0, 0.0));

    assert!(distance_stats(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]], &[0, 0, 1, 1]).is_err());
    assert!(distance_stats(&same, &[0, 0, 0, 0]).is_err());
    assert!(distance_stats(&same[..3], &[0, 0, 1]).is_err());
}

#[test]
fn nearest_self_antipodal_and_ties() {
    let refs = [vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, 0.0]];
    let reference: Vec<(usize, &[f64])> = refs.iter().enumerate().map(|(i, v)| (i, v.as_slice())).collect();
    let prompts = Tensor::from_rows(&[vec![0.0, 3.0], vec![-2.0, 0.0], vec![5.0, 0.0]]);
    let got = nearest_tokens(&prompts, &reference, 4, |i| format!("t{i}")).unwrap();
    assert_eq!((got[0][0].token_id, got[0][0].similarity), (1, 1.0));
    assert_eq!((got[1][0].token_id, got[1][0].similarity), (3, 1.0));
    // rows 0 and 2 are identical, the lower id wins
    assert_eq!(got[2][0].token_id, 0);
    assert_eq!(got[2][1].token_id, 2);
    assert_eq!(got[2][3].similarity, -1.0);
    assert!(nearest_tokens(&prompts, &[], 1, |i| i.to_string()).is_err());
}

#[test]
fn writers() {
    let v = random_vectors(6, 3, 2);
    let cats: Vec<String> = (0..6).map(|i| if i % 2 == 0 { "Human activities" } else { "Culture and the arts" }.to_string()).collect();
    let p = project_2d(&v, &names(6, "s"), &cats).unwrap();
    let csv = p.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("id,category,x,y\n"));
    let svg = p.to_svg();
    assert_eq!(svg.matches("r=\"3\"").count(), 6);
    assert!(svg.contains("Culture and the arts"));

    let row = |t: &str, s| Neighbor { token_id: 0, token: t.into(), similarity: s };
    let report = CaseStudyReport {
        strategy: "encoder-ipt-cnn".into(),
        cases: vec![CaseStudy {
            id: "x1".into(),
            tokens: vec!["the".into(), "lunar".into(), "rover".into()],
            gold: "true".into(),
            predicted: "true".into(),
            rows: vec![CasePromptRow { row: 0, nearest_vocab: row("moon", 0.9), nearest_input: row("lunar", 0.8) }],
        }],
    };
    let md = report.to_markdown();
    assert!(md.contains("the **lunar** rover"));
    assert!(md.contains("| 0 | moon | 0.9000 | lunar | 0.8000 |"));
}
