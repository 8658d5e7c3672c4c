//! Named finite-difference checks over every differentiable operation and
//! every model component at toy sizes. Backs the `grad-check` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{
    BiGru, TextEncoder, TextEncoderConfig, TransformerConfig, TransformerEncoder, VideoEncoder,
    VideoEncoderConfig,
};
use crate::error::{Error, Result};
use crate::graph::Activation;
use crate::joint::{hard_negative_ranking_loss_graph, similarity_graph, JointEmbedder, Mode, Side};
use crate::params::ParamStore;
use crate::temporal_conv::{tap_offsets, Smsdc, SmsdcConfig};
use crate::tensor::Tensor;
use crate::train::{Model, TrainConfig};

use super::{grad_check_params, grad_check_report, GradCheckReport};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// At most this share of coordinates may sit within two steps of a kink.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scalar_broadcast",
    "add_row",
    "scale",
    "add_scalar",
    "relu",
    "tanh",
    "sigmoid",
    "softmax_rows",
    "layer_norm",
    "batch_norm_train",
    "batch_norm_infer",
    "transpose",
    "sum",
    "mean",
    "mean_rows",
    "max_rows",
    "concat_cols",
    "concat_rows",
    "slice_rows",
    "reshape",
    "dilated_conv",
    "dilated_conv_centered",
    "normalize_rows",
    "gather",
];

pub const MODULES: &[&str] = &[
    "smsdc",
    "gru",
    "transformer",
    "video_encoder",
    "text_encoder",
    "joint",
    "similarity",
    "ranking_loss",
    "model",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < TOLERANCE
            && self.report.skipped as f64 <= MAX_SKIPPED_FRACTION * self.report.coordinates as f64
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("positive shape")
}

/// Values at least 0.1 away from zero.
fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = random(shape, seed);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + 0.9 * v.abs());
    }
    t
}

/// Each column is a shuffled ladder with steps of 0.3, so no two rows are close.
fn distinct_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; rows * cols];
    for c in 0..cols {
        let mut ladder: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            ladder.swap(i, rng.random_range(0..=i));
        }
        for (r, &k) in ladder.iter().enumerate() {
            data[r * cols + c] = 0.3 * k as f64 + rng.random_range(-0.05..0.05);
        }
    }
    Tensor::matrix(rows, cols, data).expect("positive shape")
}

fn op(name: &str) -> Result<GradCheckReport> {
    let r = |shape: &[usize], seed| random(shape, seed);
    match name {
        "matmul" => grad_check_report(|g, v| g.matmul(v[0], v[1]), &[r(&[3, 4], 1), r(&[4, 2], 2)], STEP),
        "add" => grad_check_report(|g, v| g.add(v[0], v[1]), &[r(&[2, 3], 3), r(&[2, 3], 4)], STEP),
        "sub" => grad_check_report(|g, v| g.sub(v[0], v[1]), &[r(&[2, 3], 5), r(&[2, 3], 6)], STEP),
        "mul" => grad_check_report(|g, v| g.mul(v[0], v[1]), &[r(&[2, 3], 7), r(&[2, 3], 8)], STEP),
        "scalar_broadcast" => grad_check_report(
            |g, v| {
                let a = g.mul(v[0], v[1])?;
                let b = g.add(v[1], a)?;
                g.sub(b, v[1])
            },
            &[r(&[2, 3], 9), r(&[1], 10)],
            STEP,
        ),
        "add_row" => grad_check_report(|g, v| g.add_row(v[0], v[1]), &[r(&[3, 4], 11), r(&[1, 4], 12)], STEP),
        "scale" => grad_check_report(|g, v| g.scale(v[0], -1.7), &[r(&[2, 3], 13)], STEP),
        "add_scalar" => grad_check_report(|g, v| g.add_scalar(v[0], 0.3), &[r(&[2, 3], 14)], STEP),
        "relu" => grad_check_report(|g, v| g.relu(v[0]), &[off_zero(&[3, 4], 15)], STEP),
        "tanh" => grad_check_report(|g, v| g.tanh(v[0]), &[r(&[3, 4], 16)], STEP),
        "sigmoid" => grad_check_report(|g, v| g.sigmoid(v[0]), &[r(&[3, 4], 17)], STEP),
        "softmax_rows" => grad_check_report(|g, v| g.softmax_rows(v[0]), &[r(&[3, 4], 18)], STEP),
        "layer_norm" => grad_check_report(
            |g, v| g.layer_norm_rows(v[0], v[1], v[2], 1e-5),
            &[r(&[3, 5], 19), r(&[1, 5], 20), r(&[1, 5], 21)],
            STEP,
        ),
        "batch_norm_train" => grad_check_report(
            |g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5),
            &[r(&[4, 3], 22), r(&[1, 3], 23), r(&[1, 3], 24)],
            STEP,
        ),
        "batch_norm_infer" => grad_check_report(
            |g, v| g.batch_norm_infer(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 0.9], 1e-5),
            &[r(&[4, 3], 25), r(&[1, 3], 26), r(&[1, 3], 27)],
            STEP,
        ),
        "transpose" => grad_check_report(|g, v| g.transpose(v[0]), &[r(&[2, 5], 28)], STEP),
        "sum" => grad_check_report(|g, v| g.sum(v[0]), &[r(&[2, 5], 29)], STEP),
        "mean" => grad_check_report(|g, v| g.mean(v[0]), &[r(&[2, 5], 30)], STEP),
        "mean_rows" => grad_check_report(|g, v| g.mean_rows(v[0]), &[r(&[4, 3], 31)], STEP),
        "max_rows" => grad_check_report(|g, v| g.max_rows(v[0]), &[distinct_rows(5, 4, 32)], STEP),
        "concat_cols" => grad_check_report(
            |g, v| g.concat_cols(&[v[0], v[1]]),
            &[r(&[2, 3], 33), r(&[2, 2], 34)],
            STEP,
        ),
        "concat_rows" => grad_check_report(
            |g, v| g.concat_rows(&[v[0], v[1]]),
            &[r(&[2, 3], 35), r(&[1, 3], 36)],
            STEP,
        ),
        "slice_rows" => grad_check_report(|g, v| g.slice_rows(v[0], 1, 2), &[r(&[4, 3], 37)], STEP),
        "reshape" => grad_check_report(|g, v| g.reshape(v[0], vec![1, 12]), &[r(&[4, 3], 38)], STEP),
        "dilated_conv" => {
            let offsets = tap_offsets(3, 2, false);
            grad_check_report(
                |g, v| g.dilated_conv(v[0], v[1], v[2], &offsets),
                &[r(&[6, 3], 39), r(&[3, 3, 2], 40), r(&[1, 2], 41)],
                STEP,
            )
        }
        "dilated_conv_centered" => {
            let offsets = tap_offsets(3, 2, true);
            grad_check_report(
                |g, v| g.dilated_conv(v[0], v[1], v[2], &offsets),
                &[r(&[6, 3], 42), r(&[3, 3, 2], 43), r(&[1, 2], 44)],
                STEP,
            )
        }
        "normalize_rows" => grad_check_report(|g, v| g.normalize_rows(v[0]), &[r(&[3, 4], 45)], STEP),
        "gather" => grad_check_report(|g, v| g.gather(v[0], &[0, 5, 5, 11]), &[r(&[3, 4], 46)], STEP),
        _ => Err(Error::Usage(format!("unknown check {name:?}"))),
    }
}

fn video_config() -> VideoEncoderConfig {
    VideoEncoderConfig {
        input_dim: 8,
        hidden: 4,
        n: 4,
        m: 2,
        sigma: Activation::Relu,
        centered: false,
    }
}

fn text_config() -> TextEncoderConfig {
    TextEncoderConfig {
        transformer: TransformerConfig {
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            layers: 2,
            positional: true,
        },
        n: 3,
        m: 2,
        sigma: Activation::Relu,
        centered: false,
    }
}

/// Smallest full model used by the `model` check.
pub fn toy_model_config() -> TrainConfig {
    let v = video_config();
    let t = text_config();
    TrainConfig {
        joint_dim: 4,
        video_input_dim: v.input_dim,
        video_hidden: v.hidden,
        video_n: v.n,
        video_m: v.m,
        text_d_model: t.transformer.d_model,
        text_heads: t.transformer.heads,
        text_ffn_dim: t.transformer.ffn_dim,
        text_layers: t.transformer.layers,
        text_n: t.n,
        text_m: t.m,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn module(name: &str) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut store = ParamStore::new();
    match name {
        "smsdc" => {
            let m = Smsdc::new(&mut store, "s", SmsdcConfig::new(3, 2, 4), &mut rng)?;
            grad_check_params(&store, &[random(&[5, 4], 101)], |g, b, v| m.forward(g, b, v[0]), STEP)
        }
        "gru" => {
            let m = BiGru::new(&mut store, "gru", 8, 4, &mut rng)?;
            grad_check_params(&store, &[random(&[5, 8], 102)], |g, b, v| m.encode(g, b, v[0]), STEP)
        }
        "transformer" => {
            let m = TransformerEncoder::new(&mut store, "tf", text_config().transformer, &mut rng)?;
            grad_check_params(&store, &[random(&[5, 8], 103)], |g, b, v| m.encode(g, b, v[0]), STEP)
        }
        "video_encoder" => {
            let m = VideoEncoder::new(&mut store, "video", video_config(), &mut rng)?;
            grad_check_params(
                &store,
                &[random(&[5, 8], 104)],
                |g, b, v| {
                    let e = m.forward(g, b, v[0])?;
                    g.concat_cols(&[e.global, e.local])
                },
                STEP,
            )
        }
        "text_encoder" => {
            let m = TextEncoder::new(&mut store, "text", text_config(), &mut rng)?;
            grad_check_params(
                &store,
                &[random(&[4, 8], 105)],
                |g, b, v| {
                    let e = m.forward(g, b, v[0])?;
                    g.concat_cols(&[e.global, e.local])
                },
                STEP,
            )
        }
        "joint" => {
            let m = JointEmbedder::new(&mut store, "joint", 6, 5, 4, &mut rng)?;
            let st = store.clone();
            grad_check_params(
                &store,
                &[random(&[3, 6], 106)],
                |g, b, v| m.embed(g, b, &st, Side::Video, v[0], Mode::Train),
                STEP,
            )
        }
        "similarity" => grad_check_report(
            |g, v| similarity_graph(g, v[0], v[1]),
            &[random(&[3, 4], 107), random(&[2, 4], 108)],
            STEP,
        ),
        "ranking_loss" => {
            // Hard negatives and hinge margins are all separated by more than the step.
            let s = Tensor::from_rows(&[
                vec![0.50, 0.42, -0.10, 0.05],
                vec![0.20, 0.10, 0.61, -0.30],
                vec![-0.20, 0.33, 0.90, 0.12],
                vec![0.71, -0.05, 0.25, 0.40],
            ]);
            grad_check_report(|g, v| hard_negative_ranking_loss_graph(g, v[0], 0.2), &[s], STEP)
        }
        "model" => {
            let model = Model::new(&toy_model_config())?;
            let videos: Vec<Tensor> = (0..3).map(|i| random(&[3 + i, 8], 110 + i as u64)).collect();
            let texts: Vec<Tensor> = (0..3).map(|i| random(&[2 + i, 8], 120 + i as u64)).collect();
            let alpha = 0.2;
            grad_check_params(
                model.store(),
                &[],
                |g, b, _| Ok(model.batch_graph(g, b, &videos, &texts, alpha)?.loss),
                STEP,
            )
        }
        _ => Err(Error::Usage(format!("unknown check {name:?}"))),
    }
}

/// Runs one named check from [`OPS`] or [`MODULES`].
pub fn run_check(name: &str) -> Result<CheckResult> {
    let all = OPS.iter().chain(MODULES);
    let Some(&name) = all.into_iter().find(|&&n| n == name) else {
        return Err(Error::Usage(format!(
            "unknown check {name:?}; expected one of: {}, {}, ops, modules, all",
            OPS.join(", "),
            MODULES.join(", ")
        )));
    };
    let report = if OPS.contains(&name) { op(name)? } else { module(name)? };
    Ok(CheckResult { name, report })
}

/// `None`, `"all"`, `"ops"`, `"modules"` or a single check name.
pub fn run_suite(selection: Option<&str>) -> Result<Vec<CheckResult>> {
    let names: Vec<&str> = match selection.unwrap_or("all") {
        "all" => OPS.iter().chain(MODULES).copied().collect(),
        "ops" => OPS.to_vec(),
        "modules" => MODULES.to_vec(),
        one => vec![one],
    };
    names.into_iter().map(run_check).collect()
}
