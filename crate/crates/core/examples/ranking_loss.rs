//! Hard-negative ranking loss on a small similarity matrix, with the
//! chosen negatives and the gradient reaching each score.

use smsdc::joint::{hard_negative_ranking_loss_graph, hard_negatives};
use smsdc::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let s = Tensor::from_rows(&[
        vec![0.9, 0.3, 0.85],
        vec![0.2, 0.6, 0.1],
        vec![0.4, 0.7, 0.8],
    ]);
    println!("hardest text per video:  {:?}", hard_negatives(&s, true)?);
    println!("hardest video per text:  {:?}", hard_negatives(&s, false)?);

    let mut g = Graph::new();
    let sv = g.leaf(s.with_requires_grad(true));
    let loss = hard_negative_ranking_loss_graph(&mut g, sv, 0.2)?;
    println!("loss {:.4}", g.value(loss).item());
    let grads = g.backward(loss)?;
    for row in grads.get(sv).expect("leaf gradient").chunks(3) {
        println!("  {row:?}");
    }
    Ok(())
}
