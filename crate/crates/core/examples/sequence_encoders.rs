//! Runs the bi-GRU and the transformer encoder on the same random sequence
//! and prints per-step output norms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smsdc::encoders::{BiGru, TransformerConfig, TransformerEncoder};
use smsdc::{Graph, ParamStore, Result, Tensor};

fn norms(t: &Tensor) -> Vec<String> {
    t.to_rows()
        .iter()
        .map(|r| format!("{:.3}", r.iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect()
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (len, d) = (6, 16);
    let x = Tensor::matrix(len, d, (0..len * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let mut store = ParamStore::new();
    let gru = BiGru::new(&mut store, "gru", d, 8, &mut rng)?;
    let tcfg = TransformerConfig {
        heads: 4,
        ..TransformerConfig::new(d, 2)
    };
    let transformer = TransformerEncoder::new(&mut store, "text", tcfg, &mut rng)?;
    println!("{} trainable parameters", store.num_trainable());

    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let input = g.constant(x);
    let h = gru.encode(&mut g, &bound, input)?;
    let c = transformer.encode(&mut g, &bound, input)?;
    println!("bi-GRU      {:?} norms {:?}", g.shape(h), norms(g.value(h)));
    println!("transformer {:?} norms {:?}", g.shape(c), norms(g.value(c)));
    Ok(())
}
