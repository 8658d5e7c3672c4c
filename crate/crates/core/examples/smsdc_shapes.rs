//! Shapes through the stacked multi-scale block and the two encoders at
//! full width.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smsdc::temporal_conv::{Smsdc, SmsdcConfig};
use smsdc::train::TrainConfig;
use smsdc::{Graph, ParamStore, Result, Tensor};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = SmsdcConfig::new(4, 2, 16);
    println!("grid (r, w): {:?}", cfg.grid());
    let mut store = ParamStore::new();
    let block = Smsdc::new(&mut store, "smsdc", cfg, &mut rng)?;
    for len in [1, 5, 20] {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(Tensor::full(&[len, cfg.d], 0.1));
        let y = block.forward(&mut g, &bound, x)?;
        println!("L={len:<3} [{len}x{}] -> {:?}", cfg.d, g.shape(y));
    }

    let full = TrainConfig::default();
    let (v, t) = (full.video_encoder(), full.text_encoder());
    println!(
        "video: global {} + local {} = {}",
        v.global_width(),
        v.smsdc().output_width(),
        v.fused_width()
    );
    println!(
        "text:  global {} + local {} = {}",
        t.global_width(),
        t.smsdc().output_width(),
        t.fused_width()
    );
    Ok(())
}
