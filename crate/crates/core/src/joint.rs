//! Joint embedding space: fusion, FC + batch-norm projection, cosine
//! similarity and the hard-negative ranking loss.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::params::{Bound, ParamKey, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

static ZERO_NORM_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// Number of zero-norm vectors seen by the similarity functions so far.
pub fn zero_norm_warnings() -> usize {
    ZERO_NORM_WARNINGS.load(Ordering::Relaxed)
}

fn warn_zero_norm(count: usize) {
    if count > 0 {
        ZERO_NORM_WARNINGS.fetch_add(count, Ordering::Relaxed);
        log::warn!("{count} zero-norm embedding(s); their similarities are set to 0");
    }
}

/// `[g, l]` with the global part first.
pub fn fuse_global_local(global: &[f64], local: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(global.len() + local.len());
    out.extend_from_slice(global);
    out.extend_from_slice(local);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Video,
    Text,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Video => "video",
            Side::Text => "text",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(Side::Video),
            "text" => Ok(Side::Text),
            _ => Err(Error::Usage(format!("unknown side {s:?} (video|text)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Keys of one FC + BN branch. The weight is stored `[in×e]` so rows of the
/// input multiply it directly.
#[derive(Clone, Copy, Debug)]
pub struct BranchKeys {
    pub weight: ParamKey,
    pub bias: ParamKey,
    pub gamma: ParamKey,
    pub beta: ParamKey,
    pub running_mean: ParamKey,
    pub running_var: ParamKey,
    pub input_width: usize,
}

impl BranchKeys {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, e: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_uniform(format!("{prefix}.fc.weight"), &[input, e], input, rng),
            bias: store.add_uniform(format!("{prefix}.fc.bias"), &[1, e], input, rng),
            gamma: store.add(format!("{prefix}.bn.gamma"), Tensor::full(&[1, e], 1.0)),
            beta: store.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[1, e])),
            running_mean: store.add_buffer(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[1, e])),
            running_var: store.add_buffer(format!("{prefix}.bn.running_var"), Tensor::full(&[1, e], 1.0)),
            input_width: input,
        }
    }

    pub fn keys(&self) -> [ParamKey; 6] {
        [
            self.weight,
            self.bias,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
        ]
    }
}

/// Per-modality projections into the shared `e`-dimensional space.
#[derive(Clone, Debug)]
pub struct JointEmbedder {
    dim: usize,
    video: BranchKeys,
    text: BranchKeys,
}

impl JointEmbedder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        video_width: usize,
        text_width: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if video_width == 0 || text_width == 0 || dim == 0 {
            return Err(Error::config("joint embedding widths must be positive"));
        }
        let video = BranchKeys::new(store, &format!("{prefix}.video"), video_width, dim, rng);
        let text = BranchKeys::new(store, &format!("{prefix}.text"), text_width, dim, rng);
        Ok(Self { dim, video, text })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn branch(&self, side: Side) -> &BranchKeys {
        match side {
            Side::Video => &self.video,
            Side::Text => &self.text,
        }
    }

    /// `BN(x·W + b)` for a batch of fused rows `x[B×in]`.
    ///
    /// Train mode normalizes with batch statistics and needs `B ≥ 2`; the
    /// returned node carries those statistics for [`Self::update_running_stats`].
    pub fn embed(
        &self,
        g: &mut Graph,
        bound: &Bound,
        store: &ParamStore,
        side: Side,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let k = self.branch(side);
        let width = g.value(x).cols();
        if width != k.input_width {
            return Err(Error::dim(format!(
                "{} joint input width {width}, expected {}",
                side.name(),
                k.input_width
            )));
        }
        let h = g.matmul(x, bound.get(k.weight))?;
        let h = g.add_row(h, bound.get(k.bias))?;
        let (gamma, beta) = (bound.get(k.gamma), bound.get(k.beta));
        match mode {
            Mode::Train => g.batch_norm_train(h, gamma, beta, BN_EPS),
            Mode::Infer => g.batch_norm_infer(
                h,
                gamma,
                beta,
                store.get(k.running_mean).data(),
                store.get(k.running_var).data(),
                BN_EPS,
            ),
        }
    }

    /// Exponential moving average with momentum 0.1. The running variance
    /// uses the unbiased batch variance.
    pub fn update_running_stats(&self, store: &mut ParamStore, side: Side, stats: &BatchStats) {
        let k = self.branch(side);
        let correction = stats.batch as f64 / (stats.batch as f64 - 1.0);
        for (r, m) in store.get_mut(k.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in store.get_mut(k.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }
}

/// `a·b / (‖a‖‖b‖)`; 0 when either norm is 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("cosine of widths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        warn_zero_norm(usize::from(na == 0.0) + usize::from(nb == 0.0));
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine scores between gallery rows; rows are videos, columns are texts.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub scores: Tensor,
    pub row_ids: Vec<u64>,
    pub col_ids: Vec<u64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.scores.rows()
    }

    pub fn cols(&self) -> usize {
        self.scores.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores.get2(i, j)
    }

    pub fn transposed(&self) -> Self {
        let (p, q) = (self.rows(), self.cols());
        let mut data = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                data[j * p + i] = self.get(i, j);
            }
        }
        Self {
            scores: Tensor::matrix(q, p, data).expect("non-empty"),
            row_ids: self.col_ids.clone(),
            col_ids: self.row_ids.clone(),
        }
    }
}

/// `S[i][j] = cos(V[i], T[j])` computed pairwise.
pub fn similarity_matrix(
    videos: &Tensor,
    texts: &Tensor,
    row_ids: Vec<u64>,
    col_ids: Vec<u64>,
) -> Result<SimilarityMatrix> {
    let (p, e) = videos.dims2()?;
    let (q, e2) = texts.dims2()?;
    if e != e2 {
        return Err(Error::dim(format!("embedding widths {e} and {e2} differ")));
    }
    if row_ids.len() != p || col_ids.len() != q {
        return Err(Error::dim("id lists do not match the embedding counts"));
    }
    let mut data = Vec::with_capacity(p * q);
    for i in 0..p {
        for j in 0..q {
            data.push(cosine_similarity(videos.row_slice(i), texts.row_slice(j))?);
        }
    }
    Ok(SimilarityMatrix {
        scores: Tensor::matrix(p, q, data)?,
        row_ids,
        col_ids,
    })
}

/// Differentiable similarity `normalize(V)·normalize(T)ᵀ`.
pub fn similarity_graph(g: &mut Graph, videos: Var, texts: Var) -> Result<Var> {
    let zero_rows = [videos, texts]
        .iter()
        .map(|&v| {
            let t = g.value(v);
            (0..t.rows())
                .filter(|&i| t.row_slice(i).iter().all(|&x| x == 0.0))
                .count()
        })
        .sum();
    warn_zero_norm(zero_rows);
    let v = g.normalize_rows(videos)?;
    let t = g.normalize_rows(texts)?;
    let tt = g.transpose(t)?;
    g.matmul(v, tt)
}

/// Index of the hardest negative for every row (`by_row`) or column; the
/// lowest index wins ties.
pub fn hard_negatives(s: &Tensor, by_row: bool) -> Result<Vec<usize>> {
    let (p, q) = s.dims2()?;
    if p != q {
        return Err(Error::dim(format!("ranking loss needs a square matrix, got {p}×{q}")));
    }
    if p < 2 {
        return Err(Error::BatchSize(format!(
            "hard-negative mining needs at least 2 pairs, got {p}"
        )));
    }
    let at = |i: usize, j: usize| if by_row { s.get2(i, j) } else { s.get2(j, i) };
    Ok((0..p)
        .map(|i| {
            let mut best: Option<usize> = None;
            for j in (0..p).filter(|&j| j != i) {
                if best.is_none_or(|b| at(i, j) > at(i, b)) {
                    best = Some(j);
                }
            }
            best.expect("p >= 2")
        })
        .collect())
}

/// Bidirectional max-margin loss with in-batch hard negatives, averaged over
/// the batch. `s` is `[B×B]` with positives on the diagonal.
pub fn hard_negative_ranking_loss_graph(g: &mut Graph, s: Var, alpha: f64) -> Result<Var> {
    let t_neg = hard_negatives(g.value(s), true)?;
    let v_neg = hard_negatives(g.value(s), false)?;
    let b = t_neg.len();
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let row: Vec<usize> = (0..b).map(|i| i * b + t_neg[i]).collect();
    let col: Vec<usize> = (0..b).map(|i| v_neg[i] * b + i).collect();
    let pos = g.gather(s, &diag)?;
    let neg_t = g.gather(s, &row)?;
    let neg_v = g.gather(s, &col)?;
    let neg_pos = g.scale(pos, -1.0)?;
    let margin = g.add_scalar(neg_pos, alpha)?;
    let a = g.add(margin, neg_t)?;
    let a = g.relu(a)?;
    let c = g.add(margin, neg_v)?;
    let c = g.relu(c)?;
    let per_pair = g.add(a, c)?;
    g.mean(per_pair)
}

/// Value form of [`hard_negative_ranking_loss_graph`].
pub fn hard_negative_ranking_loss(s: &Tensor, alpha: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(s.clone());
    let l = hard_negative_ranking_loss_graph(&mut g, v, alpha)?;
    Ok(g.value(l).item())
}
