//! Feature files, manifests, batching and the synthetic paired corpus.

pub mod batching;
pub mod features;
pub mod manifest;
pub mod synth;

pub use batching::{make_batches, BatchMode, Pair};
pub use features::{read_features, write_features, FeatureFile, FeatureItem};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use synth::{generate_synthetic, SynthCorpus, SynthSpec};
