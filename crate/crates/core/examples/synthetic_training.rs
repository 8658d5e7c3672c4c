//! Trains the toy-sized model on a generated corpus and reports validation
//! retrieval before and after.
//!
//! ```text
//! cargo run --release --example synthetic_training -- [epochs] [lr]
//! ```

use smsdc::data::{generate_synthetic, SynthSpec};
use smsdc::train::{self, Dataset, TrainConfig};
use smsdc::{data::Split, Result};

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(30, |a| a.parse().expect("epochs"));
    let spec = SynthSpec::default();
    let base = smsdc::cli::synth_config(&spec);
    let lr = args.next().map_or(base.lr, |a| a.parse().expect("lr"));
    let corpus = generate_synthetic(&spec)?;
    let data = Dataset::new(&corpus.video, &corpus.text, corpus.manifest)?;
    let cfg = TrainConfig {
        epochs,
        lr,
        ..base
    };
    let start = std::time::Instant::now();
    let outcome = train::train(&cfg, &data, None)?;
    print!("{}", outcome.log_text());
    let model = train::model_from_checkpoint(&outcome.best)?;
    let eval = train::evaluate(&model, &data, Split::Val)?;
    print!("{}", eval.table());
    println!(
        "untrained RSum {:.1}, trained RSum {:.1}, t2v R@1 {:.3}, {:.1}s",
        outcome.initial_rsum,
        eval.rsum,
        eval.t2v.recall(1),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
