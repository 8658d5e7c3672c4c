//! Recall, median rank and mAP for a hand-made score matrix where one
//! video has two captions.

use smsdc::joint::SimilarityMatrix;
use smsdc::metrics::{full_report, render_records, render_table, GroundTruth};
use smsdc::{Result, Tensor};

fn main() -> Result<()> {
    // Rows are videos 0..3, columns captions 10..14; video 1 owns 11 and 12.
    let s = SimilarityMatrix {
        scores: Tensor::from_rows(&[
            vec![0.9, 0.1, 0.3, 0.2],
            vec![0.2, 0.4, 0.8, 0.5],
            vec![0.1, 0.6, 0.2, 0.3],
        ]),
        row_ids: vec![0, 1, 2],
        col_ids: vec![10, 11, 12, 13],
    };
    let (t2v_gt, v2t_gt) = GroundTruth::from_pairs(&[(0, 10), (1, 11), (1, 12), (2, 13)]);
    let (t2v, v2t, rsum) = full_report(&s, &t2v_gt, &v2t_gt)?;
    print!("{}", render_table(&t2v, &v2t, rsum));
    print!("{}", render_records(&t2v, &v2t, rsum));
    Ok(())
}
