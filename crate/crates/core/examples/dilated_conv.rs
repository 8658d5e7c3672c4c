//! One dilated convolution on a short sequence, with the taps each output
//! row reads and the receptive field per dilation.

use smsdc::temporal_conv::{dilated_conv1d, receptive_field, tap_offsets, DilatedKernel, SequenceFeatureMap};
use smsdc::{Result, Tensor};

fn main() -> Result<()> {
    // Six steps of a 1-d signal; identity taps make the output a windowed sum.
    let rows: Vec<Vec<f64>> = (1..=6).map(|t| vec![f64::from(t)]).collect();
    let x = SequenceFeatureMap::from_rows(&rows)?;
    for r in 1..=3 {
        let w = 2;
        let kernel = DilatedKernel::new(w, r, Tensor::new(vec![w, 1, 1], vec![1.0; w])?, Tensor::zeros(&[1, 1]))?;
        let y = dilated_conv1d(&x, &kernel)?;
        let (lo, hi) = receptive_field(w, r);
        println!(
            "w={w} r={r} offsets {:?} reach {lo}..={hi}: {:?}",
            tap_offsets(w, r, false),
            y.tensor().data()
        );
    }
    Ok(())
}
