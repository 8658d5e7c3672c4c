//! Training and evaluation loop.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{make_batches, BatchMode, FeatureFile, Manifest, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::joint::{similarity_matrix, Side};
use crate::metrics::{full_report, render_records, render_table, GroundTruth, RetrievalReport};
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use model::Model;
pub use optim::{adam_step, adam_update, lr_trace, AdamState, PlateauScheduler};

pub const LOG_HEADER: &str = "# epoch loss lr val_rsum best";
pub const LOG_FILE: &str = "train.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Feature files and manifest, with every sequence widened to `f64` once.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    videos: BTreeMap<u64, Tensor>,
    texts: BTreeMap<u64, Tensor>,
}

impl Dataset {
    pub fn new(video: &FeatureFile, text: &FeatureFile, manifest: Manifest) -> Result<Self> {
        manifest.validate(video, text)?;
        let widen = |f: &FeatureFile| {
            f.items()
                .iter()
                .map(|i| (i.id, i.to_tensor(f.width())))
                .collect::<BTreeMap<_, _>>()
        };
        Ok(Self {
            videos: widen(video),
            texts: widen(text),
            manifest,
        })
    }

    /// Loads the files named by `cfg`; referential integrity is checked
    /// before anything is returned.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let video = crate::data::read_features(&cfg.video_features)?;
        let text = crate::data::read_features(&cfg.text_features)?;
        let manifest = Manifest::load(&cfg.manifest, &video, &text)?;
        Self::new(&video, &text, manifest)
    }

    pub fn video(&self, id: u64) -> Result<&Tensor> {
        self.videos
            .get(&id)
            .ok_or_else(|| Error::Manifest(format!("unknown video id {id}")))
    }

    pub fn text(&self, id: u64) -> Result<&Tensor> {
        self.texts
            .get(&id)
            .ok_or_else(|| Error::Manifest(format!("unknown caption id {id}")))
    }

    /// Video and caption ids of a split, in manifest order.
    pub fn split_ids(&self, split: Split) -> (Vec<u64>, Vec<u64>) {
        let entries = self.manifest.split(split);
        let videos = entries.iter().map(|e| e.video_id).collect();
        let captions = entries
            .iter()
            .flat_map(|e| e.caption_ids.iter().copied())
            .collect();
        (videos, captions)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub t2v: RetrievalReport,
    pub v2t: RetrievalReport,
    pub rsum: f64,
}

impl Evaluation {
    pub fn table(&self) -> String {
        render_table(&self.t2v, &self.v2t, self.rsum)
    }

    pub fn records(&self) -> String {
        render_records(&self.t2v, &self.v2t, self.rsum)
    }
}

/// Embeds every item of `split` in inference mode and scores both directions.
pub fn evaluate(model: &Model, data: &Dataset, split: Split) -> Result<Evaluation> {
    let (video_ids, caption_ids) = data.split_ids(split);
    if video_ids.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let videos = video_ids
        .iter()
        .map(|&id| data.video(id).cloned())
        .collect::<Result<Vec<_>>>()?;
    let texts = caption_ids
        .iter()
        .map(|&id| data.text(id).cloned())
        .collect::<Result<Vec<_>>>()?;
    let v = model.embed_items(Side::Video, &videos)?;
    let t = model.embed_items(Side::Text, &texts)?;
    let s = similarity_matrix(&v, &t, video_ids, caption_ids)?;
    let pairs: Vec<(u64, u64)> = data
        .manifest
        .split(split)
        .iter()
        .flat_map(|e| e.caption_ids.iter().map(move |&c| (e.video_id, c)))
        .collect();
    let (t2v_gt, v2t_gt) = GroundTruth::from_pairs(&pairs);
    let (t2v, v2t, rsum) = full_report(&s, &t2v_gt, &v2t_gt)?;
    Ok(Evaluation { t2v, v2t, rsum })
}

/// Inference-mode joint embeddings of every item on one side of `split`
/// (all splits when `None`), as `(ids, [n×e])`.
pub fn embed_side(
    model: &Model,
    data: &Dataset,
    side: Side,
    split: Option<Split>,
) -> Result<(Vec<u64>, Tensor)> {
    let splits = match split {
        Some(s) => vec![s],
        None => vec![Split::Train, Split::Val, Split::Test],
    };
    let mut ids = Vec::new();
    for s in splits {
        let (v, c) = data.split_ids(s);
        ids.extend(if side == Side::Video { v } else { c });
    }
    let seqs = ids
        .iter()
        .map(|&id| match side {
            Side::Video => data.video(id).cloned(),
            Side::Text => data.text(id).cloned(),
        })
        .collect::<Result<Vec<_>>>()?;
    let e = model.embed_items(side, &seqs)?;
    Ok((ids, e))
}

/// Rebuilds a model from a checkpoint's configuration and weights.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(&ckpt.config)?;
    model.store_mut().load_from(&ckpt.params)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_rsum: f64,
    pub best: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "{} {:.6} {:e} {:.4} {:.4}",
            self.epoch, self.loss, self.lr, self.val_rsum, self.best
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Validation RSum of the initial weights.
    pub initial_rsum: f64,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for e in &self.log {
            let _ = writeln!(out, "{}", e.line());
        }
        out
    }
}

fn snapshot(model: &Model, cfg: &TrainConfig, adam: &AdamState, epoch: usize, best: f64, lr: f64) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        params: model.store().clone(),
        adam: adam.clone(),
        epoch: epoch as u32,
        best_rsum: best,
        lr,
    }
}

struct LogSink {
    file: Option<(PathBuf, std::fs::File)>,
}

impl LogSink {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self { file: None });
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut sink = Self {
            file: Some((path, file)),
        };
        sink.line(LOG_HEADER)?;
        Ok(sink)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        if let Some((path, f)) = &mut self.file {
            writeln!(f, "{text}").map_err(|e| Error::io(path.as_path(), e))?;
            f.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

/// Trains on the `train` split, selects by validation RSum and, when `out`
/// is given, writes `train.log` and `best.ckpt` there.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(cfg)?;
    let mut adam = AdamState::new(model.store(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut sched = PlateauScheduler::new(cfg.patience, cfg.lr_factor);
    let mut sink = LogSink::open(out)?;
    let train_entries = data.manifest.split(Split::Train);
    let loss_bound = 2.0 * (cfg.alpha + 2.0);
    let mut lr = cfg.lr;
    let mut best_rsum = f64::NEG_INFINITY;
    let mut best = snapshot(&model, cfg, &adam, 0, best_rsum, lr);
    let mut log = Vec::new();
    let initial_rsum = if cfg.epochs > 0 {
        evaluate(&model, data, Split::Val)?.rsum
    } else {
        f64::NAN
    };

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(&train_entries, cfg.batch_size, cfg.seed, epoch as u64, BatchMode::Train)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let videos = batch
                .iter()
                .map(|p| data.video(p.video_id).cloned())
                .collect::<Result<Vec<_>>>()?;
            let texts = batch
                .iter()
                .map(|p| data.text(p.caption_id).cloned())
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let bound = model.store().bind(&mut g);
            let bg = model.batch_graph(&mut g, &bound, &videos, &texts, cfg.alpha)?;
            let loss = g.value(bg.loss).item();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}"
                )));
            }
            if !(0.0..=loss_bound).contains(&loss) {
                return Err(Error::Numerical(format!(
                    "loss {loss} outside [0, {loss_bound}] at epoch {epoch}, batch {bi}"
                )));
            }
            let grads = g.backward(bg.loss)?;
            model.update_running_stats(&g, &bg);
            let store = model.store_mut();
            store.zero_grad();
            store.accumulate(&bound, &grads);
            adam_step(store, &mut adam, lr)?;
            loss_sum += loss;
        }
        let val = evaluate(&model, data, Split::Val)?;
        let epoch_lr = lr;
        lr = sched.observe(val.rsum, lr);
        if val.rsum > best_rsum {
            best_rsum = val.rsum;
            best = snapshot(&model, cfg, &adam, epoch, best_rsum, lr);
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / batches.len() as f64,
            lr: epoch_lr,
            val_rsum: val.rsum,
            best: best_rsum,
        };
        log::info!("epoch {}", entry.line());
        sink.line(&entry.line())?;
        log.push(entry);
    }
    if let Some(dir) = out {
        best.save(dir.join(BEST_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        best,
        log,
        initial_rsum,
    })
}
