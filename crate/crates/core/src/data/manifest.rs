//! Video/caption pairing manifest.
//!
//! Text format, one video per line, grouped under split headers:
//!
//! ```text
//! #split:train
//! 0	0,1
//! 1	2
//! #split:val
//! 2	3,4
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::features::FeatureFile;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub video_id: u64,
    pub caption_ids: Vec<u64>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Checks the structural invariants: non-empty caption lists, unique
    /// video ids (so splits are disjoint), and unique caption ids.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut videos = BTreeSet::new();
        let mut captions = BTreeSet::new();
        for e in &entries {
            if e.caption_ids.is_empty() {
                return Err(Error::Manifest(format!("video {} has no captions", e.video_id)));
            }
            if !videos.insert(e.video_id) {
                return Err(Error::Manifest(format!(
                    "video {} listed more than once",
                    e.video_id
                )));
            }
            for &c in &e.caption_ids {
                if !captions.insert(c) {
                    return Err(Error::Manifest(format!("caption {c} listed more than once")));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut current: Option<Split> = None;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(tag) = line.strip_prefix("#split:") {
                current = Some(tag.trim().parse()?);
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let split = current.ok_or_else(|| {
                Error::Manifest(format!("line {}: entry before any #split: header", n + 1))
            })?;
            let (video, captions) = line.split_once('\t').ok_or_else(|| {
                Error::Manifest(format!("line {}: expected `video_id<TAB>caption_ids`", n + 1))
            })?;
            let parse_id = |s: &str| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Manifest(format!("line {}: bad id `{s}`", n + 1)))
            };
            let video_id = parse_id(video)?;
            let caption_ids = captions
                .split(',')
                .map(parse_id)
                .collect::<Result<Vec<_>>>()?;
            entries.push(ManifestEntry {
                video_id,
                caption_ids,
                split,
            });
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = None;
        for e in &self.entries {
            if current != Some(e.split) {
                out.push_str(&format!("#split:{}\n", e.split));
                current = Some(e.split);
            }
            let caps: Vec<String> = e.caption_ids.iter().map(u64::to_string).collect();
            out.push_str(&format!("{}\t{}\n", e.video_id, caps.join(",")));
        }
        out
    }

    /// Every id must resolve in the corresponding feature file.
    pub fn validate(&self, video: &FeatureFile, text: &FeatureFile) -> Result<()> {
        for e in &self.entries {
            if !video.contains(e.video_id) {
                return Err(Error::Manifest(format!(
                    "video {} missing from video features",
                    e.video_id
                )));
            }
            if let Some(c) = e.caption_ids.iter().find(|&&c| !text.contains(c)) {
                return Err(Error::Manifest(format!("caption {c} missing from text features")));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Reads and validates against the feature files; nothing is returned on any failure.
    pub fn load(path: impl AsRef<Path>, video: &FeatureFile, text: &FeatureFile) -> Result<Self> {
        let m = Self::read(path)?;
        m.validate(video, text)?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::features::FeatureItem;

    const SAMPLE: &str = "#split:train\n0\t0,1\n1\t2\n#split:val\n2\t3,4\n";

    #[test]
    fn parse_and_render() {
        let m = Manifest::parse(SAMPLE).unwrap();
        assert_eq!(m.split(Split::Train).len(), 2);
        assert_eq!(m.split(Split::Val)[0].caption_ids, vec![3, 4]);
        assert_eq!(m.to_text(), SAMPLE);
    }

    #[test]
    fn structural_errors() {
        assert!(Manifest::parse("0\t1\n").is_err());
        assert!(Manifest::parse("#split:train\n0\t\n").is_err());
        assert!(Manifest::parse("#split:train\n0\t1\n#split:val\n0\t2\n").is_err());
        assert!(Manifest::parse("#split:train\n0\t1\n1\t1\n").is_err());
        assert!(Manifest::parse("#split:holdout\n0\t1\n").is_err());
        assert!(Manifest::parse("#split:train\n0 1\n").is_err());
    }

    #[test]
    fn referential_integrity() {
        let m = Manifest::parse(SAMPLE).unwrap();
        let item = |id| FeatureItem::new(id, 1, vec![0.0]);
        let videos = FeatureFile::new(1, (0..3).map(item).collect()).unwrap();
        let texts = FeatureFile::new(1, (0..5).map(item).collect()).unwrap();
        m.validate(&videos, &texts).unwrap();
        let short = FeatureFile::new(1, (0..4).map(item).collect()).unwrap();
        assert!(matches!(m.validate(&videos, &short), Err(Error::Manifest(_))));
    }
}
