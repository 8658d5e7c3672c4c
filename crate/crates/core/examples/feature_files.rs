//! Writes a small synthetic corpus to a directory and reads it back.
//!
//! ```text
//! cargo run --example feature_files -- [dir]
//! ```

use smsdc::data::{generate_synthetic, read_features, write_features, Manifest, Split, SynthSpec};
fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("smsdc-features"), Into::into);
    std::fs::create_dir_all(&dir)?;
    let spec = SynthSpec {
        train: 8,
        val: 2,
        test: 2,
        captions_per_video: 2,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic(&spec)?;
    write_features(&corpus.video, dir.join("video.smdc"))?;
    write_features(&corpus.text, dir.join("text.smdc"))?;
    corpus.manifest.write(dir.join("manifest.tsv"))?;

    let video = read_features(dir.join("video.smdc"))?;
    let text = read_features(dir.join("text.smdc"))?;
    let manifest = Manifest::load(dir.join("manifest.tsv"), &video, &text)?;
    println!("{}: {} videos x {} dims, {} captions x {} dims", dir.display(), video.items().len(), video.width(), text.items().len(), text.width());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split}: {} videos", manifest.split(split).len());
    }
    let first = &video.items()[0];
    println!("video {} has {} steps, {} bytes on disk in total", first.id, first.len, video.byte_len());
    print!("{}", manifest.to_text().lines().take(3).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
