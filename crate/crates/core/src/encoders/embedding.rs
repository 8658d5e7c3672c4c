//! Frozen token embedding tables loaded from feature files.
//!
//! Each token is one feature-file item of length 1: the item id is the token
//! id and its single row is the embedding.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::features::{read_features, FeatureFile, FeatureItem};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    width: usize,
    ids: BTreeMap<u64, usize>,
    vectors: Vec<Vec<f64>>,
    frozen: bool,
}

impl EmbeddingTable {
    pub fn from_feature_file(file: &FeatureFile) -> Result<Self> {
        let mut ids = BTreeMap::new();
        let mut vectors = Vec::with_capacity(file.items().len());
        for item in file.items() {
            if item.len != 1 {
                return Err(Error::format(
                    format!("token {}", item.id),
                    0,
                    format!("embedding items must have length 1, found {}", item.len),
                ));
            }
            ids.insert(item.id, vectors.len());
            vectors.push(item.values.iter().map(|&v| f64::from(v)).collect());
        }
        Ok(Self {
            width: file.width(),
            ids,
            vectors,
            frozen: true,
        })
    }

    /// Standard-normal vectors for token ids `0..vocab`, scaled by `1/√width`.
    ///
    /// Values are rounded through `f32` so the table survives a file round trip.
    pub fn synthetic(vocab: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (width as f64).sqrt();
        let vectors: Vec<Vec<f64>> = (0..vocab)
            .map(|_| {
                (0..width)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        f64::from((v * scale) as f32)
                    })
                    .collect()
            })
            .collect();
        Self {
            width,
            ids: (0..vocab as u64).map(|i| (i, i as usize)).collect(),
            vectors,
            frozen: true,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn vector(&self, token: u64) -> Option<&[f64]> {
        self.ids.get(&token).map(|&i| self.vectors[i].as_slice())
    }

    /// `[M×width]` embeddings; unknown tokens map to the zero vector.
    pub fn lookup(&self, tokens: &[u64]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut data = Vec::with_capacity(tokens.len() * self.width);
        for t in tokens {
            match self.vector(*t) {
                Some(v) => data.extend_from_slice(v),
                None => data.extend(std::iter::repeat_n(0.0, self.width)),
            }
        }
        Tensor::matrix(tokens.len(), self.width, data)
    }

    pub fn to_feature_file(&self) -> Result<FeatureFile> {
        let items = self
            .ids
            .iter()
            .map(|(&id, &i)| {
                FeatureItem::new(id, 1, self.vectors[i].iter().map(|&v| v as f32).collect())
            })
            .collect();
        FeatureFile::new(self.width, items)
    }
}

/// Loads a frozen table and checks its width against the text encoder.
pub fn load_embeddings(path: impl AsRef<Path>, expected_width: usize) -> Result<EmbeddingTable> {
    let table = EmbeddingTable::from_feature_file(&read_features(path)?)?;
    if table.width() != expected_width {
        return Err(Error::config(format!(
            "embedding width {} does not match d_model {expected_width}",
            table.width()
        )));
    }
    Ok(table)
}
