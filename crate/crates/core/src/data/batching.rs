//! Deterministic epoch batching over a manifest split.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::ManifestEntry;
use crate::error::{Error, Result};

/// One positive (video, caption) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub video_id: u64,
    pub caption_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Short final batch is dropped.
    Train,
    /// Short final batch is kept.
    Eval,
}

/// Shuffles the split's videos with a stream keyed by `(seed, epoch)` and
/// samples one caption per video. Each video appears at most once per epoch,
/// so no batch holds the same video twice.
pub fn make_batches(
    entries: &[&ManifestEntry],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    mode: BatchMode,
) -> Result<Vec<Vec<Pair>>> {
    if entries.is_empty() {
        return Err(Error::config("cannot batch an empty split"));
    }
    if batch_size == 0 || batch_size > entries.len() {
        return Err(Error::config(format!(
            "batch size {batch_size} must be in 1..={} (videos in split)",
            entries.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut rng);
    let pairs: Vec<Pair> = order
        .iter()
        .map(|&i| {
            let e = entries[i];
            let k = rng.random_range(0..e.caption_ids.len());
            Pair {
                video_id: e.video_id,
                caption_id: e.caption_ids[k],
            }
        })
        .collect();
    Ok(pairs
        .chunks(batch_size)
        .filter(|c| mode == BatchMode::Eval || c.len() == batch_size)
        .map(<[Pair]>::to_vec)
        .collect())
}
