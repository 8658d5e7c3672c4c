//! Post-norm Transformer encoder over word embeddings.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamKey, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    /// Add sinusoidal position encodings before the first layer.
    pub positional: bool,
}

impl TransformerConfig {
    /// Eight heads, FFN width `4·d_model`, position encodings on.
    pub fn new(d_model: usize, layers: usize) -> Self {
        Self {
            d_model,
            heads: 8,
            ffn_dim: 4 * d_model,
            layers,
            positional: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::config("transformer widths must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(…)`.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, d_model]);
    let data = pe.data_mut();
    for pos in 0..len {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[derive(Clone, Debug)]
struct HeadKeys {
    wq: ParamKey,
    bq: ParamKey,
    wk: ParamKey,
    bk: ParamKey,
    wv: ParamKey,
    bv: ParamKey,
}

#[derive(Clone, Debug)]
struct LayerKeys {
    heads: Vec<HeadKeys>,
    wo: ParamKey,
    bo: ParamKey,
    ln1_gamma: ParamKey,
    ln1_beta: ParamKey,
    w1: ParamKey,
    b1: ParamKey,
    w2: ParamKey,
    b2: ParamKey,
    ln2_gamma: ParamKey,
    ln2_beta: ParamKey,
}

/// Output of one layer, with per-head attention matrices kept for inspection.
pub struct LayerOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    cfg: TransformerConfig,
    layers: Vec<LayerKeys>,
}

impl TransformerEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let dk = cfg.head_dim();
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                let heads = (0..cfg.heads)
                    .map(|h| {
                        let hp = format!("{p}.head{h}");
                        HeadKeys {
                            wq: store.add_uniform(format!("{hp}.wq"), &[d, dk], d, rng),
                            bq: store.add_uniform(format!("{hp}.bq"), &[1, dk], d, rng),
                            wk: store.add_uniform(format!("{hp}.wk"), &[d, dk], d, rng),
                            bk: store.add_uniform(format!("{hp}.bk"), &[1, dk], d, rng),
                            wv: store.add_uniform(format!("{hp}.wv"), &[d, dk], d, rng),
                            bv: store.add_uniform(format!("{hp}.bv"), &[1, dk], d, rng),
                        }
                    })
                    .collect();
                LayerKeys {
                    heads,
                    wo: store.add_uniform(format!("{p}.wo"), &[d, d], d, rng),
                    bo: store.add_uniform(format!("{p}.bo"), &[1, d], d, rng),
                    ln1_gamma: store.add(format!("{p}.ln1.gamma"), Tensor::full(&[1, d], 1.0)),
                    ln1_beta: store.add(format!("{p}.ln1.beta"), Tensor::zeros(&[1, d])),
                    w1: store.add_uniform(format!("{p}.ffn.w1"), &[d, cfg.ffn_dim], d, rng),
                    b1: store.add_uniform(format!("{p}.ffn.b1"), &[1, cfg.ffn_dim], d, rng),
                    w2: store.add_uniform(
                        format!("{p}.ffn.w2"),
                        &[cfg.ffn_dim, d],
                        cfg.ffn_dim,
                        rng,
                    ),
                    b2: store.add_uniform(format!("{p}.ffn.b2"), &[1, d], cfg.ffn_dim, rng),
                    ln2_gamma: store.add(format!("{p}.ln2.gamma"), Tensor::full(&[1, d], 1.0)),
                    ln2_beta: store.add(format!("{p}.ln2.beta"), Tensor::zeros(&[1, d])),
                }
            })
            .collect();
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// `Y = LN(X + MHSA(X))`, `out = LN(Y + FFN(Y))`.
    pub fn layer(&self, g: &mut Graph, bound: &Bound, index: usize, x: Var) -> Result<LayerOutput> {
        let keys = self
            .layers
            .get(index)
            .ok_or_else(|| Error::config(format!("no transformer layer {index}")))?;
        let (_, d) = g.value(x).dims2()?;
        if d != self.cfg.d_model {
            return Err(Error::dim(format!(
                "transformer input width {d} does not match d_model {}",
                self.cfg.d_model
            )));
        }
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(keys.heads.len());
        let mut attention = Vec::with_capacity(keys.heads.len());
        for h in &keys.heads {
            let mut proj = |w: ParamKey, b: ParamKey| -> Result<Var> {
                let xw = g.matmul(x, bound.get(w))?;
                g.add_row(xw, bound.get(b))
            };
            let q = proj(h.wq, h.bq)?;
            let k = proj(h.wk, h.bk)?;
            let v = proj(h.wv, h.bv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax_rows(scores)?;
            attention.push(weights);
            heads.push(g.matmul(weights, v)?);
        }
        let concat = g.concat_cols(&heads)?;
        let attn = g.matmul(concat, bound.get(keys.wo))?;
        let attn = g.add_row(attn, bound.get(keys.bo))?;
        let res = g.add(x, attn)?;
        let y = g.layer_norm_rows(
            res,
            bound.get(keys.ln1_gamma),
            bound.get(keys.ln1_beta),
            LAYER_NORM_EPS,
        )?;
        let hidden = g.matmul(y, bound.get(keys.w1))?;
        let hidden = g.add_row(hidden, bound.get(keys.b1))?;
        let hidden = g.relu(hidden)?;
        let ffn = g.matmul(hidden, bound.get(keys.w2))?;
        let ffn = g.add_row(ffn, bound.get(keys.b2))?;
        let res = g.add(y, ffn)?;
        let output = g.layer_norm_rows(
            res,
            bound.get(keys.ln2_gamma),
            bound.get(keys.ln2_beta),
            LAYER_NORM_EPS,
        )?;
        Ok(LayerOutput { output, attention })
    }

    /// Adds position encodings once (when enabled), then runs every layer.
    pub fn encode(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let (m, _) = g.value(x).dims2()?;
        let mut h = if self.cfg.positional {
            let pe = g.constant(positional_encoding(m, self.cfg.d_model));
            g.add(x, pe)?
        } else {
            x
        };
        for l in 0..self.layers.len() {
            h = self.layer(g, bound, l, h)?.output;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rows(m: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(m, d, data).unwrap()
    }

    fn build(cfg: TransformerConfig) -> (ParamStore, TransformerEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let enc = TransformerEncoder::new(&mut store, "tx", cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = TransformerConfig {
            heads: 3,
            ..TransformerConfig::new(8, 1)
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            TransformerEncoder::new(&mut store, "tx", cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = TransformerConfig {
            heads: 2,
            ..TransformerConfig::new(8, 1)
        };
        let (store, enc) = build(cfg);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(random_rows(5, 8, 1));
        let out = enc.layer(&mut g, &bound, 0, x).unwrap();
        for a in out.attention {
            for row in g.value(a).to_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_then_output_projection() {
        let cfg = TransformerConfig {
            heads: 2,
            ..TransformerConfig::new(4, 1)
        };
        let (store, enc) = build(cfg);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(random_rows(1, 4, 2));
        let out = enc.layer(&mut g, &bound, 0, x).unwrap();
        for a in &out.attention {
            assert_eq!(g.value(*a).data(), &[1.0]);
        }
        // Rebuild MHSA from the value and output projections alone.
        let keys = &enc.layers[0];
        let heads: Vec<Var> = keys
            .heads
            .iter()
            .map(|h| {
                let v = g.matmul(x, bound.get(h.wv)).unwrap();
                g.add_row(v, bound.get(h.bv)).unwrap()
            })
            .collect();
        let cat = g.concat_cols(&heads).unwrap();
        let o = g.matmul(cat, bound.get(keys.wo)).unwrap();
        let o = g.add_row(o, bound.get(keys.bo)).unwrap();
        let res = g.add(x, o).unwrap();
        let y = g
            .layer_norm_rows(res, bound.get(keys.ln1_gamma), bound.get(keys.ln1_beta), LAYER_NORM_EPS)
            .unwrap();
        // First residual block must agree with the layer's internal value.
        let full = enc.layer(&mut g, &bound, 0, x).unwrap().output;
        let hidden = g.matmul(y, bound.get(keys.w1)).unwrap();
        let hidden = g.add_row(hidden, bound.get(keys.b1)).unwrap();
        let hidden = g.relu(hidden).unwrap();
        let f = g.matmul(hidden, bound.get(keys.w2)).unwrap();
        let f = g.add_row(f, bound.get(keys.b2)).unwrap();
        let r2 = g.add(y, f).unwrap();
        let expect = g
            .layer_norm_rows(r2, bound.get(keys.ln2_gamma), bound.get(keys.ln2_beta), LAYER_NORM_EPS)
            .unwrap();
        assert!(g.value(full).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn empty_stack_adds_position_encoding() {
        let (store, enc) = build(TransformerConfig::new(8, 0));
        let t = random_rows(3, 8, 4);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(t.clone());
        let y = enc.encode(&mut g, &bound, x).unwrap();
        let pe = positional_encoding(3, 8);
        let expected: Vec<f64> = t.data().iter().zip(pe.data()).map(|(a, b)| a + b).collect();
        assert_eq!(g.value(y).data(), &expected[..]);
        assert_eq!(pe.data()[0], 0.0);
        assert_eq!(pe.data()[1], 1.0);
    }
}
