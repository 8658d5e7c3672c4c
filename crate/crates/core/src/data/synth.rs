//! Synthetic paired sequences with a planted shared latent.
//!
//! Each pair draws `z ~ N(0, I)`. Video rows are `A·z + ε` and caption rows
//! are `B·z + ε'`, with `A` and `B` independent fixed random maps and
//! `ε ~ N(0, σ²)` drawn per row. Matching items share `z`; nothing else does.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::features::{FeatureFile, FeatureItem};
use crate::data::manifest::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub captions_per_video: usize,
    pub latent_dim: usize,
    pub video_len: (usize, usize),
    pub text_len: (usize, usize),
    pub video_dim: usize,
    pub text_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train: 500,
            val: 100,
            test: 0,
            captions_per_video: 1,
            latent_dim: 16,
            video_len: (4, 8),
            text_len: (4, 8),
            video_dim: 64,
            text_dim: 48,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub video: FeatureFile,
    pub text: FeatureFile,
    pub manifest: Manifest,
}

impl SynthSpec {
    pub fn pairs(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.pairs(),
            self.captions_per_video,
            self.latent_dim,
            self.video_dim,
            self.text_dim,
            self.video_len.0,
            self.text_len.0,
        ];
        if positive.contains(&0) {
            return Err(Error::config("synthetic spec fields must be positive"));
        }
        if self.video_len.0 > self.video_len.1 || self.text_len.0 > self.text_len.1 {
            return Err(Error::config("length range minimum exceeds maximum"));
        }
        if self.video_len.1 < 2 || self.text_len.1 < 2 {
            return Err(Error::config("maximum lengths must be at least 2"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise scale must be finite and non-negative"));
        }
        Ok(())
    }

    /// Applies `key=value` assignments, e.g. `train=200`, `video_len=3..6`.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("expected key=value, got `{assignment}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = || Error::Usage(format!("bad value `{value}` for `{key}`"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let range = || -> Result<(usize, usize)> {
            let (a, b) = value.split_once("..").ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        };
        match key {
            "train" => self.train = int()?,
            "val" => self.val = int()?,
            "test" => self.test = int()?,
            "captions" => self.captions_per_video = int()?,
            "latent" => self.latent_dim = int()?,
            "video_len" => self.video_len = range()?,
            "text_len" => self.text_len = range()?,
            "video_dim" => self.video_dim = int()?,
            "text_dim" => self.text_dim = int()?,
            "noise" => self.noise = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Usage(format!("unknown synthetic spec key `{key}`"))),
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "train={} val={} test={} captions={} latent={} video_len={}..{} text_len={}..{} \
             video_dim={} text_dim={} noise={} seed={}",
            self.train,
            self.val,
            self.test,
            self.captions_per_video,
            self.latent_dim,
            self.video_len.0,
            self.video_len.1,
            self.text_len.0,
            self.text_len.1,
            self.video_dim,
            self.text_dim,
            self.noise,
            self.seed
        );
        s
    }
}

fn random_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

fn sequence(
    rng: &mut ChaCha8Rng,
    map: &[f64],
    width: usize,
    z: &[f64],
    len: usize,
    noise: &Normal<f64>,
) -> Vec<f32> {
    let clean: Vec<f64> = map
        .chunks(z.len())
        .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
        .collect();
    debug_assert_eq!(clean.len(), width);
    let mut out = Vec::with_capacity(len * width);
    for _ in 0..len {
        for c in &clean {
            out.push((c + noise.sample(rng)) as f32);
        }
    }
    out
}

/// Deterministic function of `spec`. Video `p` has id `p`; its captions have
/// ids `p·captions_per_video + k`. The first `train` pairs form the train
/// split, then `val`, then `test`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = random_map(&mut rng, spec.video_dim, spec.latent_dim);
    let b = random_map(&mut rng, spec.text_dim, spec.latent_dim);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;

    let mut videos = Vec::with_capacity(spec.pairs());
    let mut texts = Vec::with_capacity(spec.pairs() * spec.captions_per_video);
    let mut entries = Vec::with_capacity(spec.pairs());
    for p in 0..spec.pairs() {
        let z: Vec<f64> = (0..spec.latent_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let n = rng.random_range(spec.video_len.0..=spec.video_len.1);
        let values = sequence(&mut rng, &a, spec.video_dim, &z, n, &noise);
        videos.push(FeatureItem::new(p as u64, n as u32, values));
        let mut caption_ids = Vec::with_capacity(spec.captions_per_video);
        for k in 0..spec.captions_per_video {
            let id = (p * spec.captions_per_video + k) as u64;
            let m = rng.random_range(spec.text_len.0..=spec.text_len.1);
            let values = sequence(&mut rng, &b, spec.text_dim, &z, m, &noise);
            texts.push(FeatureItem::new(id, m as u32, values));
            caption_ids.push(id);
        }
        let split = if p < spec.train {
            Split::Train
        } else if p < spec.train + spec.val {
            Split::Val
        } else {
            Split::Test
        };
        entries.push(ManifestEntry {
            video_id: p as u64,
            caption_ids,
            split,
        });
    }
    Ok(SynthCorpus {
        video: FeatureFile::with_max_len(spec.video_dim, spec.video_len.1 as u32, videos)?,
        text: FeatureFile::with_max_len(spec.text_dim, spec.text_len.1 as u32, texts)?,
        manifest: Manifest::new(entries)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train: 6,
            val: 2,
            test: 1,
            captions_per_video: 2,
            latent_dim: 4,
            video_dim: 5,
            text_dim: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noise_free_rows_repeat() {
        let spec = SynthSpec {
            noise: 0.0,
            ..small()
        };
        let c = generate_synthetic(&spec).unwrap();
        for item in c.video.items() {
            let rows: Vec<&[f32]> = item.values.chunks(5).collect();
            assert!(rows.iter().all(|r| *r == rows[0]));
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.video.to_bytes(), b.video.to_bytes());
        assert_eq!(a.text.to_bytes(), b.text.to_bytes());
        assert_eq!(a.manifest.to_text(), b.manifest.to_text());
        let c = generate_synthetic(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.video.to_bytes(), c.video.to_bytes());
    }

    #[test]
    fn splits_and_ids() {
        let c = generate_synthetic(&small()).unwrap();
        assert_eq!(c.manifest.split(Split::Train).len(), 6);
        assert_eq!(c.manifest.split(Split::Val).len(), 2);
        assert_eq!(c.manifest.split(Split::Test).len(), 1);
        assert_eq!(c.text.items().len(), 18);
        c.manifest.validate(&c.video, &c.text).unwrap();
        for item in c.video.items() {
            assert!((4..=8).contains(&item.len));
        }
    }

    #[test]
    fn apply_overrides() {
        let mut s = SynthSpec::default();
        s.apply("train=10").unwrap();
        s.apply("video_len=2..3").unwrap();
        s.apply("noise=0.5").unwrap();
        assert_eq!((s.train, s.video_len, s.noise), (10, (2, 3), 0.5));
        assert!(s.apply("bogus=1").is_err());
        assert!(s.apply("train").is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_synthetic(&SynthSpec { latent_dim: 0, ..small() }).is_err());
        assert!(generate_synthetic(&SynthSpec { video_len: (1, 1), ..small() }).is_err());
        assert!(generate_synthetic(&SynthSpec { text_len: (5, 3), ..small() }).is_err());
    }
}
