//! Full dual encoder: both modality branches plus the joint projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{TextEncoder, VideoEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::joint::{hard_negative_ranking_loss_graph, similarity_graph, JointEmbedder, Mode, Side};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

use super::config::TrainConfig;

/// Stream ids of the per-module initialization generators.
const VIDEO_STREAM: u64 = 1;
const TEXT_STREAM: u64 = 2;
const JOINT_STREAM: u64 = 3;

/// Rows embedded per graph during inference.
const INFER_CHUNK: usize = 64;

fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
pub struct Model {
    store: ParamStore,
    video: VideoEncoder,
    text: TextEncoder,
    joint: JointEmbedder,
}

/// Handles of one training batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchGraph {
    pub loss: Var,
    pub video_embedding: Var,
    pub text_embedding: Var,
    pub similarity: Var,
}

impl Model {
    /// Each module draws its initial weights from its own generator stream
    /// of `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let video = VideoEncoder::new(
            &mut store,
            "video",
            cfg.video_encoder(),
            &mut module_rng(cfg.seed, VIDEO_STREAM),
        )?;
        let text = TextEncoder::new(
            &mut store,
            "text",
            cfg.text_encoder(),
            &mut module_rng(cfg.seed, TEXT_STREAM),
        )?;
        let joint = JointEmbedder::new(
            &mut store,
            "joint",
            video.config().fused_width(),
            text.config().fused_width(),
            cfg.joint_dim,
            &mut module_rng(cfg.seed, JOINT_STREAM),
        )?;
        Ok(Self {
            store,
            video,
            text,
            joint,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn video(&self) -> &VideoEncoder {
        &self.video
    }

    pub fn text(&self) -> &TextEncoder {
        &self.text
    }

    pub fn joint(&self) -> &JointEmbedder {
        &self.joint
    }

    pub fn fused_width(&self, side: Side) -> usize {
        match side {
            Side::Video => self.video.config().fused_width(),
            Side::Text => self.text.config().fused_width(),
        }
    }

    /// `[global, local]` for one sequence, `[1×fused]`.
    pub fn fused(&self, g: &mut Graph, bound: &Bound, side: Side, seq: Var) -> Result<Var> {
        let enc = match side {
            Side::Video => self.video.forward(g, bound, seq)?,
            Side::Text => self.text.forward(g, bound, seq)?,
        };
        g.concat_cols(&[enc.global, enc.local])
    }

    /// Joint embeddings `[B×e]` of a batch of input sequences.
    pub fn embed_batch(
        &self,
        g: &mut Graph,
        bound: &Bound,
        side: Side,
        seqs: &[Tensor],
        mode: Mode,
    ) -> Result<Var> {
        let rows = seqs
            .iter()
            .map(|s| {
                let x = g.constant(s.clone());
                self.fused(g, bound, side, x)
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = g.concat_rows(&rows)?;
        self.joint.embed(g, bound, &self.store, side, fused, mode)
    }

    /// Training-mode forward of aligned video/text batches through the loss.
    pub fn batch_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        videos: &[Tensor],
        texts: &[Tensor],
        alpha: f64,
    ) -> Result<BatchGraph> {
        if videos.len() != texts.len() {
            return Err(Error::BatchSize(format!(
                "{} videos but {} captions in a batch",
                videos.len(),
                texts.len()
            )));
        }
        let video_embedding = self.embed_batch(g, bound, Side::Video, videos, Mode::Train)?;
        let text_embedding = self.embed_batch(g, bound, Side::Text, texts, Mode::Train)?;
        let similarity = similarity_graph(g, video_embedding, text_embedding)?;
        let loss = hard_negative_ranking_loss_graph(g, similarity, alpha)?;
        Ok(BatchGraph {
            loss,
            video_embedding,
            text_embedding,
            similarity,
        })
    }

    /// Folds the batch statistics of a training step into the running buffers.
    pub fn update_running_stats(&mut self, g: &Graph, batch: &BatchGraph) {
        for (side, v) in [
            (Side::Video, batch.video_embedding),
            (Side::Text, batch.text_embedding),
        ] {
            if let Some(stats) = g.batch_stats(v) {
                self.joint.update_running_stats(&mut self.store, side, &stats);
            }
        }
    }

    /// Inference-mode joint embeddings, one row per sequence.
    pub fn embed_items(&self, side: Side, seqs: &[Tensor]) -> Result<Tensor> {
        if seqs.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        let mut data = Vec::with_capacity(seqs.len() * self.joint.dim());
        for chunk in seqs.chunks(INFER_CHUNK) {
            let mut g = Graph::new();
            let bound = self.store.bind(&mut g);
            let e = self.embed_batch(&mut g, &bound, side, chunk, Mode::Infer)?;
            data.extend_from_slice(g.value(e).data());
        }
        Tensor::matrix(seqs.len(), self.joint.dim(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            joint_dim: 6,
            video_input_dim: 5,
            video_hidden: 2,
            video_n: 2,
            video_m: 1,
            text_d_model: 4,
            text_heads: 2,
            text_ffn_dim: 8,
            text_layers: 1,
            text_n: 2,
            text_m: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(&tiny()).unwrap();
        let b = Model::new(&tiny()).unwrap();
        assert_eq!(a.store(), b.store());
        let mut other = tiny();
        other.seed = 9;
        assert_ne!(Model::new(&other).unwrap().store(), a.store());
    }

    #[test]
    fn inference_is_row_independent() {
        let model = Model::new(&tiny()).unwrap();
        let seqs: Vec<Tensor> = (0..3)
            .map(|i| Tensor::full(&[2 + i, 5], 0.1 * (i as f64 + 1.0)))
            .collect();
        let all = model.embed_items(Side::Video, &seqs).unwrap();
        let one = model.embed_items(Side::Video, &seqs[1..2]).unwrap();
        assert_eq!(all.row_slice(1), one.row_slice(0));
    }

    #[test]
    fn batch_loss_is_bounded() {
        let model = Model::new(&tiny()).unwrap();
        let videos: Vec<Tensor> = (0..3).map(|i| Tensor::full(&[3, 5], i as f64 - 1.0)).collect();
        let texts: Vec<Tensor> = (0..3).map(|i| Tensor::full(&[2, 4], 0.5 * i as f64)).collect();
        let mut g = Graph::new();
        let bound = model.store().bind(&mut g);
        let b = model.batch_graph(&mut g, &bound, &videos, &texts, 0.2).unwrap();
        let l = g.value(b.loss).item();
        assert!((0.0..=2.0 * 2.2).contains(&l), "{l}");
    }
}
