//! Line-oriented `key = value` training configuration.
//!
//! ```text
//! # comment
//! alpha = 0.2
//! video.smsdc.n = 4
//! data.manifest = corpus/manifest.tsv
//! ```
//!
//! Every key is listed in [`KEYS`]; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoders::{TextEncoderConfig, TransformerConfig, VideoEncoderConfig};
use crate::error::{Error, Result};
use crate::graph::Activation;

/// Recognized keys, in the order [`TrainConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "alpha",
    "joint.dim",
    "video.input_dim",
    "video.hidden",
    "video.smsdc.n",
    "video.smsdc.m",
    "text.d_model",
    "text.layers",
    "text.heads",
    "text.ffn_dim",
    "text.positional",
    "text.smsdc.n",
    "text.smsdc.m",
    "smsdc.activation",
    "smsdc.centered",
    "train.batch_size",
    "train.lr",
    "train.patience",
    "train.lr_factor",
    "train.epochs",
    "train.seed",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "data.video_features",
    "data.text_features",
    "data.manifest",
    "output.dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub joint_dim: usize,
    pub video_input_dim: usize,
    pub video_hidden: usize,
    pub video_n: usize,
    pub video_m: usize,
    pub text_d_model: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ffn_dim: usize,
    pub text_positional: bool,
    pub text_n: usize,
    pub text_m: usize,
    pub activation: Activation,
    pub centered: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub video_features: PathBuf,
    pub text_features: PathBuf,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    /// Full-size defaults: 2048-d frame features, 512-d GRU, 768-d text,
    /// three Transformer layers and a 2048-d joint space.
    fn default() -> Self {
        Self {
            alpha: 0.2,
            joint_dim: 2048,
            video_input_dim: 2048,
            video_hidden: 512,
            video_n: 4,
            video_m: 2,
            text_d_model: 768,
            text_layers: 3,
            text_heads: 8,
            text_ffn_dim: 4 * 768,
            text_positional: true,
            text_n: 3,
            text_m: 2,
            activation: Activation::Relu,
            centered: false,
            batch_size: 64,
            lr: 5e-5,
            patience: 3,
            lr_factor: 0.5,
            epochs: 30,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            video_features: PathBuf::from("video.smdc"),
            text_features: PathBuf::from("text.smdc"),
            manifest: PathBuf::from("manifest.tsv"),
            output_dir: PathBuf::from("run"),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl TrainConfig {
    /// Small dimensions used by the synthetic benchmark.
    pub fn toy() -> Self {
        Self {
            joint_dim: 128,
            video_input_dim: 64,
            video_hidden: 32,
            text_d_model: 48,
            text_ffn_dim: 4 * 48,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "alpha" => self.alpha = parse_num(key, v)?,
            "joint.dim" => self.joint_dim = parse_num(key, v)?,
            "video.input_dim" => self.video_input_dim = parse_num(key, v)?,
            "video.hidden" => self.video_hidden = parse_num(key, v)?,
            "video.smsdc.n" => self.video_n = parse_num(key, v)?,
            "video.smsdc.m" => self.video_m = parse_num(key, v)?,
            "text.d_model" => self.text_d_model = parse_num(key, v)?,
            "text.layers" => self.text_layers = parse_num(key, v)?,
            "text.heads" => self.text_heads = parse_num(key, v)?,
            "text.ffn_dim" => self.text_ffn_dim = parse_num(key, v)?,
            "text.positional" => self.text_positional = parse_bool(key, v)?,
            "text.smsdc.n" => self.text_n = parse_num(key, v)?,
            "text.smsdc.m" => self.text_m = parse_num(key, v)?,
            "smsdc.activation" => self.activation = v.parse()?,
            "smsdc.centered" => self.centered = parse_bool(key, v)?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.lr" => self.lr = parse_num(key, v)?,
            "train.patience" => self.patience = parse_num(key, v)?,
            "train.lr_factor" => self.lr_factor = parse_num(key, v)?,
            "train.epochs" => self.epochs = parse_num(key, v)?,
            "train.seed" => self.seed = parse_num(key, v)?,
            "adam.beta1" => self.beta1 = parse_num(key, v)?,
            "adam.beta2" => self.beta2 = parse_num(key, v)?,
            "adam.eps" => self.eps = parse_num(key, v)?,
            "data.video_features" => self.video_features = PathBuf::from(v),
            "data.text_features" => self.text_features = PathBuf::from(v),
            "data.manifest" => self.manifest = PathBuf::from(v),
            "output.dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Relative data and output paths are taken relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.video_features,
            &mut self.text_features,
            &mut self.manifest,
            &mut self.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    fn get(&self, key: &str) -> String {
        match key {
            "alpha" => self.alpha.to_string(),
            "joint.dim" => self.joint_dim.to_string(),
            "video.input_dim" => self.video_input_dim.to_string(),
            "video.hidden" => self.video_hidden.to_string(),
            "video.smsdc.n" => self.video_n.to_string(),
            "video.smsdc.m" => self.video_m.to_string(),
            "text.d_model" => self.text_d_model.to_string(),
            "text.layers" => self.text_layers.to_string(),
            "text.heads" => self.text_heads.to_string(),
            "text.ffn_dim" => self.text_ffn_dim.to_string(),
            "text.positional" => self.text_positional.to_string(),
            "text.smsdc.n" => self.text_n.to_string(),
            "text.smsdc.m" => self.text_m.to_string(),
            "smsdc.activation" => self.activation.name().to_string(),
            "smsdc.centered" => self.centered.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.patience" => self.patience.to_string(),
            "train.lr_factor" => self.lr_factor.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.seed" => self.seed.to_string(),
            "adam.beta1" => self.beta1.to_string(),
            "adam.beta2" => self.beta2.to_string(),
            "adam.eps" => self.eps.to_string(),
            "data.video_features" => self.video_features.display().to_string(),
            "data.text_features" => self.text_features.display().to_string(),
            "data.manifest" => self.manifest.display().to_string(),
            "output.dir" => self.output_dir.display().to_string(),
            _ => unreachable!("KEYS and get() are kept in sync"),
        }
    }

    pub fn video_encoder(&self) -> VideoEncoderConfig {
        VideoEncoderConfig {
            input_dim: self.video_input_dim,
            hidden: self.video_hidden,
            n: self.video_n,
            m: self.video_m,
            sigma: self.activation,
            centered: self.centered,
        }
    }

    pub fn text_encoder(&self) -> TextEncoderConfig {
        TextEncoderConfig {
            transformer: TransformerConfig {
                d_model: self.text_d_model,
                heads: self.text_heads,
                ffn_dim: self.text_ffn_dim,
                layers: self.text_layers,
                positional: self.text_positional,
            },
            n: self.text_n,
            m: self.text_m,
            sigma: self.activation,
            centered: self.centered,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::config("alpha must be non-negative"));
        }
        if !(self.lr > 0.0) || !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::config("lr must be positive and lr_factor in (0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        for (name, v) in [
            ("joint.dim", self.joint_dim),
            ("video.input_dim", self.video_input_dim),
            ("video.hidden", self.video_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        self.video_encoder().smsdc().validate()?;
        self.text_encoder().smsdc().validate()?;
        self.text_encoder().transformer.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.alpha, 0.2);
        assert_eq!((c.video_n, c.video_m), (4, 2));
        assert_eq!((c.text_n, c.text_m), (3, 2));
        assert_eq!(c.text_layers, 3);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.lr, 5e-5);
        assert_eq!(c.epochs, 30);
        assert_eq!(c.joint_dim, 2048);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::toy();
        c.lr = 1.25e-3;
        c.activation = Activation::Tanh;
        c.manifest = PathBuf::from("a b/manifest.tsv");
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_overrides_and_errors() {
        let c = TrainConfig::parse("# header\n\nvideo.smsdc.n = 2\n").unwrap();
        assert_eq!(c.video_n, 2);
        assert!(matches!(TrainConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("alpha"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("text.heads = 7"), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.apply_override("train.epochs=3").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(matches!(c.apply_override("train.epochs"), Err(Error::Usage(_))));
    }
}
