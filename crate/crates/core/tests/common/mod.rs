//! Reference implementations written independently of the library code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (p, q, r) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; r]; p];
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..q {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// `y[t] = bias + Σ_{i=1..w} x[t + r·i] · W_i` with rows past the end read as zero.
/// `weights[i][k][o]` is tap `i+1`.
pub fn dilated_conv(
    x: &[Vec<f64>],
    weights: &[Vec<Vec<f64>>],
    bias: &[f64],
    r: usize,
) -> Vec<Vec<f64>> {
    let l = x.len();
    let d_out = bias.len();
    let mut y = vec![bias.to_vec(); l];
    for (t, row) in y.iter_mut().enumerate() {
        for (i, tap) in weights.iter().enumerate() {
            let src = t + r * (i + 1);
            let padded: Vec<f64> = if src < l { x[src].clone() } else { vec![0.0; x[0].len()] };
            for (k, &xv) in padded.iter().enumerate() {
                for o in 0..d_out {
                    row[o] += xv * tap[k][o];
                }
            }
        }
    }
    y
}

/// Enumerates every negative instead of picking one.
pub fn ranking_loss(s: &[Vec<f64>], alpha: f64) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut worst_text: f64 = 0.0;
        let mut worst_video: f64 = 0.0;
        for j in (0..b).filter(|&j| j != i) {
            worst_text = worst_text.max((alpha - s[i][i] + s[i][j]).max(0.0));
            worst_video = worst_video.max((alpha - s[i][i] + s[j][i]).max(0.0));
        }
        total += worst_text + worst_video;
    }
    total / b as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionOracle {
    pub recalls: [f64; 3],
    pub med_r: f64,
    pub mean_r: f64,
    pub map: f64,
}

/// Rank of gallery item `j`: one plus the number of items that beat it,
/// counted pairwise (higher score, or equal score and smaller id).
fn pairwise_rank(scores: &[f64], ids: &[u64], j: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&k| scores[k] > scores[j] || (scores[k] == scores[j] && ids[k] < ids[j]))
        .count()
}

pub fn direction(
    rows: &[Vec<f64>],
    query_ids: &[u64],
    gallery_ids: &[u64],
    relevant: &BTreeMap<u64, BTreeSet<u64>>,
) -> DirectionOracle {
    let n = rows.len();
    let mut best = Vec::new();
    let mut ap_sum = 0.0;
    for (q, scores) in query_ids.iter().zip(rows) {
        let pos = &relevant[q];
        let mut ranks: Vec<usize> = (0..gallery_ids.len())
            .filter(|&j| pos.contains(&gallery_ids[j]))
            .map(|j| pairwise_rank(scores, gallery_ids, j))
            .collect();
        ranks.sort_unstable();
        best.push(ranks[0]);
        let mut ap = 0.0;
        for (h, &r) in ranks.iter().enumerate() {
            ap += (h + 1) as f64 / r as f64;
        }
        ap_sum += ap / ranks.len() as f64;
    }
    let recall = |k: usize| best.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    let mut sorted = best.clone();
    sorted.sort_unstable();
    let med_r = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    DirectionOracle {
        recalls: [recall(1), recall(5), recall(10)],
        med_r,
        mean_r: best.iter().sum::<usize>() as f64 / n as f64,
        map: ap_sum / n as f64,
    }
}

pub fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

/// Top-1 pairing accuracy of the least-squares linear map from mean video
/// features to mean text features, matching each text to its nearest
/// predicted video by cosine.
pub fn least_squares_pairing(videos: &[Vec<f64>], texts: &[Vec<f64>]) -> f64 {
    let p = videos.len();
    let x = DMatrix::from_fn(p, videos[0].len() + 1, |i, j| {
        if j < videos[0].len() { videos[i][j] } else { 1.0 }
    });
    let y = DMatrix::from_fn(p, texts[0].len(), |i, j| texts[i][j]);
    let w = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .expect("least-squares solve");
    let pred = &x * w;
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut hits = 0;
    for t in 0..p {
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for v in 0..p {
            let row: Vec<f64> = pred.row(v).iter().copied().collect();
            let s = cos(&row, &texts[t]);
            if s > best_s {
                best_s = s;
                best = v;
            }
        }
        hits += usize::from(best == t);
    }
    hits as f64 / p as f64
}
