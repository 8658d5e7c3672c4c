//! Rank-based retrieval metrics with multi-positive ground truth.
//!
//! Galleries are sorted by descending score; equal scores are ordered by
//! ascending item id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::joint::SimilarityMatrix;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Query id to relevant gallery ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    relevant: BTreeMap<u64, BTreeSet<u64>>,
}

impl GroundTruth {
    pub fn new(relevant: BTreeMap<u64, BTreeSet<u64>>) -> Result<Self> {
        if let Some((q, _)) = relevant.iter().find(|(_, s)| s.is_empty()) {
            return Err(Error::GroundTruth(format!("query {q} has no relevant items")));
        }
        Ok(Self { relevant })
    }

    /// Ground truth for both directions from `(video, caption)` pairs:
    /// `(text→video, video→text)`.
    pub fn from_pairs(pairs: &[(u64, u64)]) -> (Self, Self) {
        let mut t2v: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        let mut v2t: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        for &(v, t) in pairs {
            t2v.entry(t).or_default().insert(v);
            v2t.entry(v).or_default().insert(t);
        }
        (Self { relevant: t2v }, Self { relevant: v2t })
    }

    pub fn positives(&self, query: u64) -> Option<&BTreeSet<u64>> {
        self.relevant.get(&query)
    }

    pub fn len(&self) -> usize {
        self.relevant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevant.is_empty()
    }
}

/// Gallery positions in ranked order.
pub fn ranking(scores: &[f64], ids: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie.
    order.sort_by(|&a, &b| match (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)) {
        Ordering::Equal => ids[a].cmp(&ids[b]),
        o => o,
    });
    order
}

/// 1-based ranks of every positive, ascending.
pub fn positive_ranks(scores: &[f64], ids: &[u64], positives: &BTreeSet<u64>) -> Result<Vec<usize>> {
    if positives.is_empty() {
        return Err(Error::GroundTruth("empty positive set".into()));
    }
    if scores.len() != ids.len() {
        return Err(Error::dim("scores and gallery ids differ in length"));
    }
    let ranks: Vec<usize> = ranking(scores, ids)
        .into_iter()
        .enumerate()
        .filter(|&(_, j)| positives.contains(&ids[j]))
        .map(|(r, _)| r + 1)
        .collect();
    if ranks.len() != positives.len() {
        return Err(Error::GroundTruth(format!(
            "{} of {} positives are missing from the gallery",
            positives.len() - ranks.len(),
            positives.len()
        )));
    }
    Ok(ranks)
}

pub fn rank_of_best_positive(scores: &[f64], ids: &[u64], positives: &BTreeSet<u64>) -> Result<usize> {
    Ok(positive_ranks(scores, ids, positives)?[0])
}

/// Fraction of queries with rank ≤ k.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if k == 0 {
        return Err(Error::config("recall cutoff must be at least 1"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn median_and_mean_rank(ranks: &[usize]) -> Result<(f64, f64)> {
    if ranks.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let mean = sorted.iter().sum::<usize>() as f64 / n as f64;
    Ok((median, mean))
}

/// Non-interpolated average precision from the ascending ranks of all positives.
pub fn average_precision(positive_ranks: &[usize]) -> f64 {
    let total: f64 = positive_ranks
        .iter()
        .enumerate()
        .map(|(hit, &r)| (hit + 1) as f64 / r as f64)
        .sum();
    total / positive_ranks.len() as f64
}

/// mAP over every row of `scores` (rows are queries, columns the gallery).
pub fn mean_average_precision(s: &SimilarityMatrix, gt: &GroundTruth) -> Result<f64> {
    Ok(evaluate_rows(s, gt)?.1)
}

fn evaluate_rows(s: &SimilarityMatrix, gt: &GroundTruth) -> Result<(Vec<usize>, f64)> {
    if s.row_ids.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut best = Vec::with_capacity(s.rows());
    let mut ap_sum = 0.0;
    for (i, q) in s.row_ids.iter().enumerate() {
        let positives = gt
            .positives(*q)
            .ok_or_else(|| Error::GroundTruth(format!("query {q} has no ground truth")))?;
        let ranks = positive_ranks(s.scores.row_slice(i), &s.col_ids, positives)?;
        best.push(ranks[0]);
        ap_sum += average_precision(&ranks);
    }
    Ok((best, ap_sum / s.rows() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    TextToVideo,
    VideoToText,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::TextToVideo => "t2v",
            Direction::VideoToText => "v2t",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// Fractions in `[0, 1]` keyed by K.
    pub r_at: BTreeMap<usize, f64>,
    pub med_r: f64,
    pub mean_r: f64,
    pub map: f64,
    /// `(R@1 + R@5 + R@10)·100`.
    pub rsum_contribution: f64,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.r_at[&k]
    }
}

/// Metrics for the queries on the rows of `s`.
pub fn direction_report(s: &SimilarityMatrix, gt: &GroundTruth, direction: Direction) -> Result<RetrievalReport> {
    let (ranks, map) = evaluate_rows(s, gt)?;
    let mut r_at = BTreeMap::new();
    for k in RECALL_KS {
        r_at.insert(k, recall_at_k(&ranks, k)?);
    }
    let (med_r, mean_r) = median_and_mean_rank(&ranks)?;
    let rsum_contribution = (r_at[&1] + r_at[&5] + r_at[&10]) * 100.0;
    Ok(RetrievalReport {
        direction,
        r_at,
        med_r,
        mean_r,
        map,
        rsum_contribution,
    })
}

/// Both directions from one video×text matrix plus RSum in percentage points.
pub fn full_report(
    s: &SimilarityMatrix,
    t2v_gt: &GroundTruth,
    v2t_gt: &GroundTruth,
) -> Result<(RetrievalReport, RetrievalReport, f64)> {
    let t2v = direction_report(&s.transposed(), t2v_gt, Direction::TextToVideo)?;
    let v2t = direction_report(s, v2t_gt, Direction::VideoToText)?;
    let rsum = rsum_from_recalls(&[
        t2v.recall(1),
        t2v.recall(5),
        t2v.recall(10),
        v2t.recall(1),
        v2t.recall(5),
        v2t.recall(10),
    ]) * 100.0;
    Ok((t2v, v2t, rsum))
}

pub fn rsum_from_recalls(recalls: &[f64]) -> f64 {
    recalls.iter().sum()
}

fn format_rank(r: f64) -> String {
    if r.fract() == 0.0 {
        format!("{}", r as u64)
    } else {
        format!("{r:.1}")
    }
}

/// Aligned table: R@1, R@5, R@10, MedR, mAP for each direction, then RSum.
pub fn render_table(t2v: &RetrievalReport, v2t: &RetrievalReport, rsum: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6}|{:>7}{:>7}{:>7}{:>7}{:>8} |{:>7}{:>7}{:>7}{:>7}{:>8} |{:>8}",
        "", "R@1", "R@5", "R@10", "MedR", "mAP", "R@1", "R@5", "R@10", "MedR", "mAP", "RSum"
    );
    let cells = |r: &RetrievalReport| {
        format!(
            "{:>7.1}{:>7.1}{:>7.1}{:>7}{:>8.3}",
            r.recall(1) * 100.0,
            r.recall(5) * 100.0,
            r.recall(10) * 100.0,
            format_rank(r.med_r),
            r.map
        )
    };
    let _ = writeln!(out, "{:<6}|{} |{} |{:>8.1}", "model", cells(t2v), cells(v2t), rsum);
    out
}

/// One `direction metric value` line per metric.
pub fn render_records(t2v: &RetrievalReport, v2t: &RetrievalReport, rsum: f64) -> String {
    let mut out = String::new();
    for r in [t2v, v2t] {
        let d = r.direction.tag();
        for (k, v) in &r.r_at {
            let _ = writeln!(out, "{d} R@{k} {v}");
        }
        let _ = writeln!(out, "{d} MedR {}", r.med_r);
        let _ = writeln!(out, "{d} MeanR {}", r.mean_r);
        let _ = writeln!(out, "{d} mAP {}", r.map);
    }
    let _ = writeln!(out, "all RSum {rsum}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn set(ids: &[u64]) -> BTreeSet<u64> {
        ids.iter().copied().collect()
    }

    #[test]
    fn best_positive_rank_cases() {
        let ids = [1, 2, 3];
        assert_eq!(rank_of_best_positive(&[0.9, 0.5, 0.7], &ids, &set(&[1])).unwrap(), 1);
        assert_eq!(rank_of_best_positive(&[0.9, 0.5, 0.7], &ids, &set(&[2, 3])).unwrap(), 2);
        assert_eq!(rank_of_best_positive(&[0.3; 3], &[0, 1, 2], &set(&[0])).unwrap(), 1);
        assert!(matches!(
            rank_of_best_positive(&[0.3], &[0], &set(&[])),
            Err(Error::GroundTruth(_))
        ));
    }

    #[test]
    fn recall_and_rank_stats() {
        assert_eq!(recall_at_k(&[1, 1, 1], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[1, 2, 11], 10).unwrap(), 2.0 / 3.0);
        assert!(matches!(recall_at_k(&[], 1), Err(Error::EmptyEvaluation)));
        assert_eq!(median_and_mean_rank(&[7]).unwrap(), (7.0, 7.0));
        assert_eq!(median_and_mean_rank(&[1, 3]).unwrap(), (2.0, 2.0));
        let (m, mean) = median_and_mean_rank(&[1, 2, 100]).unwrap();
        assert_eq!(m, 2.0);
        assert!((mean - 103.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn average_precision_cases() {
        assert_eq!(average_precision(&[1]), 1.0);
        assert!((average_precision(&[1, 3]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[1, 2, 3, 4]), 1.0);
    }

    #[test]
    fn identity_matrix_is_perfect() {
        let ids: Vec<u64> = (0..4).collect();
        let s = SimilarityMatrix {
            scores: Tensor::identity(4),
            row_ids: ids.clone(),
            col_ids: ids.clone(),
        };
        let pairs: Vec<(u64, u64)> = ids.iter().map(|&i| (i, i)).collect();
        let (t2v_gt, v2t_gt) = GroundTruth::from_pairs(&pairs);
        let (t2v, v2t, rsum) = full_report(&s, &t2v_gt, &v2t_gt).unwrap();
        assert_eq!(t2v.recall(1), 1.0);
        assert_eq!(v2t.recall(1), 1.0);
        assert_eq!(rsum, 600.0);
        let table = render_table(&t2v, &v2t, rsum);
        assert!(table.contains("600.0"));
        assert!(render_records(&t2v, &v2t, rsum).contains("t2v MedR 1\n"));
    }

    #[test]
    fn published_row_sum() {
        let rsum = rsum_from_recalls(&[8.8, 25.5, 36.5, 14.0, 33.1, 44.9]);
        assert!((rsum - 162.8).abs() < 1e-9);
    }

    #[test]
    fn signed_zeros_tie() {
        assert_eq!(ranking(&[0.0, -0.0], &[5, 2]), vec![1, 0]);
    }

    #[test]
    fn median_rendering() {
        assert_eq!(format_rank(22.0), "22");
        assert_eq!(format_rank(2.5), "2.5");
    }
}
