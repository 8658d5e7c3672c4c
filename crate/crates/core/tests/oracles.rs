//! Library results compared against independent reference computations.

mod common;

use std::collections::BTreeSet;

use rand::Rng;

use smsdc::data::{generate_synthetic, make_batches, read_features, write_features, BatchMode, Split, SynthSpec};
use smsdc::encoders::{mean_pool, BiGru, TransformerConfig, TransformerEncoder};
use smsdc::joint::{cosine_similarity, hard_negative_ranking_loss, BN_EPS};
use smsdc::temporal_conv::{activate_and_pool, BranchStack, msdc, smsdc, tap_offsets, DilatedKernel, SequenceFeatureMap, Smsdc, SmsdcConfig};
use smsdc::train::{adam_update, Checkpoint, Model, TrainConfig};
use smsdc::{Activation, Graph, ParamStore, Tensor};

fn graph_value(f: impl FnOnce(&mut Graph) -> smsdc::Var) -> Tensor {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).clone()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn taps(k: &DilatedKernel) -> Vec<Vec<Vec<f64>>> {
    let [w, din, dout] = k.weights.shape() else { panic!("rank-3 kernel") };
    let data = k.weights.data();
    (0..*w)
        .map(|i| (0..*din).map(|a| data[(i * din + a) * dout..(i * din + a + 1) * dout].to_vec()).collect())
        .collect()
}

#[test]
fn matmul_matches_naive_product() {
    let mut rng = common::rng(1);
    for _ in 0..100 {
        let (p, q, r) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let a = common::random_rows(&mut rng, p, q);
        let b = common::random_rows(&mut rng, q, r);
        let got = graph_value(|g| {
            let x = g.constant(Tensor::from_rows(&a));
            let y = g.constant(Tensor::from_rows(&b));
            g.matmul(x, y).unwrap()
        });
        let want: Vec<f64> = common::matmul(&a, &b).concat();
        assert!(max_diff(got.data(), &want) <= 1e-12);
    }
}

#[test]
fn forward_taps_read_ahead() {
    assert_eq!(tap_offsets(3, 2, false), vec![2, 4, 6]);
    assert_eq!(tap_offsets(2, 1, false), vec![1, 2]);
}

#[test]
fn smsdc_matches_composed_reference() {
    let mut rng = common::rng(2);
    let cfg = SmsdcConfig::new(3, 2, 4);
    let mut store = ParamStore::new();
    let block = Smsdc::new(&mut store, "s", cfg, &mut rng).unwrap();
    let stage = |x: &[Vec<f64>], kernels: &[DilatedKernel]| -> Vec<Vec<f64>> {
        kernels
            .iter()
            .map(|k| {
                let y = common::dilated_conv(x, &taps(k), k.bias.data(), k.r);
                (0..cfg.d)
                    .map(|c| y.iter().map(|row| row[c].max(0.0)).fold(f64::NEG_INFINITY, f64::max))
                    .collect()
            })
            .collect()
    };
    for len in 1..=7 {
        let x = common::random_rows(&mut rng, len, cfg.d);
        let pooled = stage(&x, &block.kernels(&store, 1));
        let want: Vec<f64> = stage(&pooled, &block.kernels(&store, 2)).concat();
        let got = smsdc(
            &SequenceFeatureMap::from_rows(&x).unwrap(),
            &cfg,
            &block.kernels(&store, 1),
            &block.kernels(&store, 2),
        )
        .unwrap();
        assert_eq!(got.shape(), &[1, cfg.output_width()]);
        assert!(max_diff(got.data(), &want) <= 1e-12);
    }
}

#[test]
fn smsdc_is_positively_homogeneous_without_bias() {
    let mut rng = common::rng(3);
    let cfg = SmsdcConfig::new(2, 2, 3);
    let mut store = ParamStore::new();
    let block = Smsdc::new(&mut store, "s", cfg, &mut rng).unwrap();
    let strip = |ks: Vec<DilatedKernel>| -> Vec<DilatedKernel> {
        ks.into_iter()
            .map(|mut k| {
                k.bias = Tensor::zeros(k.bias.shape());
                k
            })
            .collect()
    };
    let (s1, s2) = (strip(block.kernels(&store, 1)), strip(block.kernels(&store, 2)));
    for sigma in [Activation::Relu, Activation::Identity] {
        let cfg = SmsdcConfig { sigma, ..cfg };
        let x = common::random_rows(&mut rng, 5, 3);
        let scaled: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| 2.5 * v).collect()).collect();
        let a = smsdc(&SequenceFeatureMap::from_rows(&x).unwrap(), &cfg, &s1, &s2).unwrap();
        let b = smsdc(&SequenceFeatureMap::from_rows(&scaled).unwrap(), &cfg, &s1, &s2).unwrap();
        let a: Vec<f64> = a.data().iter().map(|v| 2.5 * v).collect();
        assert!(max_diff(&a, b.data()) <= 1e-12);
    }
}

#[test]
fn pooling_ignores_time_order() {
    let mut rng = common::rng(4);
    let cfg = SmsdcConfig::new(2, 1, 3);
    let mut store = ParamStore::new();
    let block = Smsdc::new(&mut store, "s", cfg, &mut rng).unwrap();
    let x = SequenceFeatureMap::from_rows(&common::random_rows(&mut rng, 6, 3)).unwrap();
    let stack = msdc(&x, &cfg, &block.kernels(&store, 1)).unwrap();
    let pooled = activate_and_pool(&stack, Activation::Relu).unwrap();
    for b in 0..stack.branch_count() {
        let mut rows = stack.branch(b).to_rows();
        rows.reverse();
        rows.swap(0, 2);
        let once = BranchStack {
            values: Tensor::from_rows(&rows).reshape(vec![1, 6, 3]).unwrap(),
        };
        let p = activate_and_pool(&once, Activation::Relu).unwrap();
        assert_eq!(p.branch(0).data(), &pooled.values.data()[b * 3..(b + 1) * 3]);
    }
}

#[test]
fn mean_pool_is_linear_and_order_free() {
    let mut rng = common::rng(5);
    let a = common::random_rows(&mut rng, 5, 4);
    let b = common::random_rows(&mut rng, 5, 4);
    let pool = |rows: &[Vec<f64>]| mean_pool(&SequenceFeatureMap::from_rows(rows).unwrap());
    let combo: Vec<Vec<f64>> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| 2.0 * u - 3.0 * v).collect())
        .collect();
    let want: Vec<f64> = pool(&a)
        .data()
        .iter()
        .zip(pool(&b).data())
        .map(|(u, v)| 2.0 * u - 3.0 * v)
        .collect();
    assert!(max_diff(pool(&combo).data(), &want) <= 1e-12);
    let mut shuffled = a.clone();
    shuffled.rotate_left(2);
    assert!(max_diff(pool(&shuffled).data(), pool(&a).data()) <= 1e-15);
}

fn encode_gru(store: &ParamStore, gru: &BiGru, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let x = g.constant(Tensor::from_rows(rows));
    let y = gru.encode(&mut g, &bound, x).unwrap();
    g.value(y).to_rows()
}

#[test]
fn gru_reversal_swaps_directions() {
    let mut rng = common::rng(6);
    let h = 3;
    let mut store = ParamStore::new();
    let gru = BiGru::new(&mut store, "gru", 4, h, &mut rng).unwrap();
    let mut swapped = store.clone();
    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
    for name in names.iter().filter(|n| n.contains(".fwd.")) {
        let fwd = store.find(name).unwrap();
        let bwd = store.find(&name.replace(".fwd.", ".bwd.")).unwrap();
        *swapped.get_mut(fwd) = store.get(bwd).clone();
        *swapped.get_mut(bwd) = store.get(fwd).clone();
    }
    let x = common::random_rows(&mut rng, 5, 4);
    let mut rev = x.clone();
    rev.reverse();
    let a = encode_gru(&store, &gru, &x);
    let b = encode_gru(&swapped, &gru, &rev);
    for t in 0..5 {
        let other = &b[4 - t];
        assert!(max_diff(&a[t][..h], &other[h..]) <= 1e-12);
        assert!(max_diff(&a[t][h..], &other[..h]) <= 1e-12);
    }
}

#[test]
fn gru_forward_half_is_causal() {
    let mut rng = common::rng(7);
    let h = 3;
    let mut store = ParamStore::new();
    let gru = BiGru::new(&mut store, "gru", 4, h, &mut rng).unwrap();
    let x = common::random_rows(&mut rng, 6, 4);
    let mut y = x.clone();
    y[4] = common::random_rows(&mut rng, 1, 4).remove(0);
    let (a, b) = (encode_gru(&store, &gru, &x), encode_gru(&store, &gru, &y));
    for t in 0..4 {
        assert_eq!(a[t][..h], b[t][..h]);
        assert_ne!(a[t][h..], b[t][h..]);
    }
    assert_ne!(a[5][..h], b[5][..h]);
}

fn encode_transformer(positional: bool, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut rng = common::rng(8);
    let cfg = TransformerConfig {
        heads: 2,
        ffn_dim: 16,
        positional,
        ..TransformerConfig::new(8, 2)
    };
    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "t", cfg, &mut rng).unwrap();
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let x = g.constant(Tensor::from_rows(rows));
    let y = enc.encode(&mut g, &bound, x).unwrap();
    g.value(y).to_rows()
}

#[test]
fn transformer_without_positions_is_permutation_equivariant() {
    let mut rng = common::rng(9);
    let x = common::random_rows(&mut rng, 5, 8);
    let perm = [3, 0, 4, 1, 2];
    let px: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
    let (a, b) = (encode_transformer(false, &x), encode_transformer(false, &px));
    for (k, &i) in perm.iter().enumerate() {
        assert!(max_diff(&a[i], &b[k]) <= 1e-10);
    }
    let (a, b) = (encode_transformer(true, &x), encode_transformer(true, &px));
    assert!(max_diff(&a[perm[0]], &b[0]) > 1e-6);
}

#[test]
fn batch_norm_train_standardizes_columns() {
    let mut rng = common::rng(10);
    let rows = common::random_rows(&mut rng, 16, 5);
    let gamma = [1.5, 0.5, 2.0, 1.0, 0.1];
    let beta = [0.0, 1.0, -1.0, 0.3, 2.0];
    let y = graph_value(|g| {
        let x = g.constant(Tensor::from_rows(&rows));
        let ga = g.constant(Tensor::row(&gamma));
        let be = g.constant(Tensor::row(&beta));
        g.batch_norm_train(x, ga, be, BN_EPS).unwrap()
    })
    .to_rows();
    for c in 0..5 {
        let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        let m = col.iter().sum::<f64>() / 16.0;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 16.0;
        let out: Vec<f64> = y.iter().map(|r| r[c]).collect();
        let om = out.iter().sum::<f64>() / 16.0;
        let ov = out.iter().map(|x| (x - om).powi(2)).sum::<f64>() / 16.0;
        assert!((om - beta[c]).abs() < 1e-12);
        assert!((ov - gamma[c] * gamma[c] * v / (v + BN_EPS)).abs() < 1e-10);
    }
}

#[test]
fn softmax_rows_sum_to_one_for_large_inputs() {
    let mut rng = common::rng(11);
    for _ in 0..50 {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..7).map(|_| rng.random_range(-1e3..1e3)).collect())
            .collect();
        let y = graph_value(|g| {
            let x = g.constant(Tensor::from_rows(&rows));
            g.softmax_rows(x).unwrap()
        });
        for row in y.to_rows() {
            assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn ranking_loss_matches_exhaustive_search() {
    let mut rng = common::rng(12);
    for b in 2..=10 {
        let s = common::random_rows(&mut rng, b, b);
        let got = hard_negative_ranking_loss(&Tensor::from_rows(&s), 0.2).unwrap();
        assert_eq!(got, common::ranking_loss(&s, 0.2));
    }
}

#[test]
fn cosine_matches_direct_formula() {
    let mut rng = common::rng(13);
    for _ in 0..50 {
        let a = common::random_rows(&mut rng, 1, 9).remove(0);
        let b = common::random_rows(&mut rng, 1, 9).remove(0);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((cosine_similarity(&a, &b).unwrap() - dot / (n(&a) * n(&b))).abs() < 1e-12);
    }
}

#[test]
fn planted_pairs_are_linearly_recoverable() {
    let spec = SynthSpec {
        train: 90,
        val: 10,
        seed: 3,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic(&spec).unwrap();
    let means = |ff: &smsdc::data::FeatureFile| -> Vec<Vec<f64>> {
        ff.items()
            .iter()
            .map(|it| mean_pool(&it.to_map(ff.width())).into_data())
            .collect()
    };
    let accuracy = common::least_squares_pairing(&means(&corpus.video), &means(&corpus.text));
    assert!(accuracy >= 0.95, "pairing accuracy {accuracy}");
}

#[test]
fn synthetic_corpus_is_seeded() {
    let spec = SynthSpec {
        train: 20,
        val: 5,
        ..SynthSpec::default()
    };
    assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    let other = SynthSpec { seed: 1, ..spec.clone() };
    assert_ne!(generate_synthetic(&spec).unwrap().video, generate_synthetic(&other).unwrap().video);
}

#[test]
fn feature_files_round_trip_on_disk() {
    let spec = SynthSpec {
        train: 6,
        val: 2,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("video.smdc");
    write_features(&corpus.video, &path).unwrap();
    assert_eq!(read_features(&path).unwrap(), corpus.video);
}

#[test]
fn batches_cover_each_video_once() {
    let spec = SynthSpec {
        train: 50,
        val: 5,
        captions_per_video: 3,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic(&spec).unwrap();
    let entries = corpus.manifest.split(Split::Train);
    for epoch in 0..4 {
        let batches = make_batches(&entries, 8, 9, epoch, BatchMode::Train).unwrap();
        assert_eq!(batches.len(), 6);
        let videos: Vec<u64> = batches.iter().flatten().map(|p| p.video_id).collect();
        assert_eq!(videos.iter().collect::<BTreeSet<_>>().len(), videos.len());
        assert!(batches.iter().all(|b| b.len() == 8));
        for p in batches.iter().flatten() {
            let e = entries.iter().find(|e| e.video_id == p.video_id).unwrap();
            assert!(e.caption_ids.contains(&p.caption_id));
        }
        assert_eq!(batches, make_batches(&entries, 8, 9, epoch, BatchMode::Train).unwrap());
    }
    let eval = make_batches(&entries, 8, 9, 0, BatchMode::Eval).unwrap();
    assert_eq!(eval.iter().map(Vec::len).sum::<usize>(), 50);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let g = [3.0, -0.02, 1e-3];
    let mut p = [0.0; 3];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    adam_update(&mut p, &g, &mut m, &mut v, 1, 0.01, 0.9, 0.999, 1e-8);
    for (x, gi) in p.iter().zip(g) {
        assert!((x + 0.01 * gi.signum()).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut cfg = TrainConfig::toy();
    cfg.joint_dim = 8;
    cfg.video_hidden = 4;
    let model = Model::new(&cfg).unwrap();
    let ckpt = Checkpoint {
        config: cfg.clone(),
        params: model.store().clone(),
        adam: smsdc::train::AdamState::new(model.store(), 0.9, 0.999, 1e-8),
        epoch: 3,
        best_rsum: 123.5,
        lr: 2.5e-5,
    };
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.epoch, 3);
    assert_eq!(back.lr, 2.5e-5);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}
