//! Finite-difference checks of every operation and model component.
//!
//! ```text
//! cargo run --release --example gradient_check -- [name|ops|modules|all]
//! ```

use smsdc::gradcheck::suite::{run_suite, TOLERANCE};
use smsdc::Result;

fn main() -> Result<()> {
    let which = std::env::args().nth(1);
    let results = run_suite(which.as_deref())?;
    for r in &results {
        println!(
            "{:<4} {:<22} {:.2e} (analytic {:+.5}, numeric {:+.5}, {}/{} skipped)",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.report.max_relative_error,
            r.report.analytic,
            r.report.numeric,
            r.report.skipped,
            r.report.coordinates
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{failed} of {} above {TOLERANCE:e}", results.len());
    Ok(())
}
