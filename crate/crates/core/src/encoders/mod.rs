//! Global sequence encoders and the two modality-specific branches.
//!
//! The video branch runs a bidirectional GRU over frame features; the text
//! branch runs a Transformer over word embeddings. Both mean-pool their
//! per-step outputs into a global vector and feed the same per-step map into a
//! stacked multi-scale dilated convolution for the local vector.

pub mod embedding;
pub mod gru;
pub mod transformer;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::temporal_conv::{SequenceFeatureMap, Smsdc, SmsdcConfig};
use crate::tensor::Tensor;

pub use embedding::{load_embeddings, EmbeddingTable};
pub use gru::{BiGru, Direction};
pub use transformer::{positional_encoding, TransformerConfig, TransformerEncoder};

/// Row mean of a feature map.
pub fn mean_pool(f: &SequenceFeatureMap) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let m = g.mean_rows(x).expect("rank-2 map");
    g.value(m).clone()
}

/// Row mean of raw rows; empty input is an error.
pub fn mean_pool_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    Ok(mean_pool(&SequenceFeatureMap::from_rows(rows)?))
}

/// Graph handles produced by one branch.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// Per-step map fed to the local encoder.
    pub map: Var,
    pub global: Var,
    pub local: Var,
}

/// Values of one encoded item.
#[derive(Clone, Debug, PartialEq)]
pub struct DualFeatures {
    pub global: Tensor,
    pub local: Tensor,
    pub full_map: SequenceFeatureMap,
}

impl DualFeatures {
    pub fn from_vars(g: &Graph, vars: &EncodedVars) -> Result<Self> {
        Ok(Self {
            global: g.value(vars.global).clone(),
            local: g.value(vars.local).clone(),
            full_map: SequenceFeatureMap::new(g.value(vars.map).clone())?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VideoEncoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub n: usize,
    pub m: usize,
    pub sigma: Activation,
    pub centered: bool,
}

impl VideoEncoderConfig {
    pub fn smsdc(&self) -> SmsdcConfig {
        SmsdcConfig {
            n: self.n,
            m: self.m,
            d: 2 * self.hidden,
            sigma: self.sigma,
            centered: self.centered,
        }
    }

    pub fn global_width(&self) -> usize {
        2 * self.hidden
    }

    /// Width of `[global, local]`.
    pub fn fused_width(&self) -> usize {
        self.global_width() + self.smsdc().output_width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextEncoderConfig {
    pub transformer: TransformerConfig,
    pub n: usize,
    pub m: usize,
    pub sigma: Activation,
    pub centered: bool,
}

impl TextEncoderConfig {
    pub fn smsdc(&self) -> SmsdcConfig {
        SmsdcConfig {
            n: self.n,
            m: self.m,
            d: self.transformer.d_model,
            sigma: self.sigma,
            centered: self.centered,
        }
    }

    pub fn global_width(&self) -> usize {
        self.transformer.d_model
    }

    pub fn fused_width(&self) -> usize {
        self.global_width() + self.smsdc().output_width()
    }
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    cfg: VideoEncoderConfig,
    gru: BiGru,
    smsdc: Smsdc,
}

impl VideoEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: VideoEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let gru = BiGru::new(store, &format!("{prefix}.gru"), cfg.input_dim, cfg.hidden, rng)?;
        let smsdc = Smsdc::new(store, &format!("{prefix}.smsdc"), cfg.smsdc(), rng)?;
        Ok(Self { cfg, gru, smsdc })
    }

    pub fn config(&self) -> &VideoEncoderConfig {
        &self.cfg
    }

    pub fn gru(&self) -> &BiGru {
        &self.gru
    }

    pub fn smsdc(&self) -> &Smsdc {
        &self.smsdc
    }

    /// `[N×d_in]` frames to global `[1×2h]` and local `[1×nm·2h]` vectors.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, frames: Var) -> Result<EncodedVars> {
        let map = self.gru.encode(g, bound, frames)?;
        let global = g.mean_rows(map)?;
        let local = self.smsdc.forward(g, bound, map)?;
        Ok(EncodedVars { map, global, local })
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    transformer: TransformerEncoder,
    smsdc: Smsdc,
}

impl TextEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: TextEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let transformer = TransformerEncoder::new(
            store,
            &format!("{prefix}.transformer"),
            cfg.transformer,
            rng,
        )?;
        let smsdc = Smsdc::new(store, &format!("{prefix}.smsdc"), cfg.smsdc(), rng)?;
        Ok(Self {
            cfg,
            transformer,
            smsdc,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn transformer(&self) -> &TransformerEncoder {
        &self.transformer
    }

    pub fn smsdc(&self) -> &Smsdc {
        &self.smsdc
    }

    /// `[M×d_model]` embeddings to global `[1×d_model]` and local `[1×nm·d_model]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, words: Var) -> Result<EncodedVars> {
        let width = g.value(words).cols();
        if width != self.cfg.transformer.d_model {
            return Err(Error::dim(format!(
                "word embedding width {width} does not match d_model {}",
                self.cfg.transformer.d_model
            )));
        }
        let map = self.transformer.encode(g, bound, words)?;
        let global = g.mean_rows(map)?;
        let local = self.smsdc.forward(g, bound, map)?;
        Ok(EncodedVars { map, global, local })
    }
}
