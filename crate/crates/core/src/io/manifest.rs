//! Split manifest: one `scene_id<TAB>path<TAB>split<TAB>point_count` line per scene.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{read_file, write_file};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidData(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub scene_id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
    pub point_count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneManifest {
    pub entries: Vec<ManifestEntry>,
}

impl SceneManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if e.scene_id.is_empty() || e.scene_id.contains(['\t', '\n']) {
                return Err(Error::InvalidData(format!("invalid scene id {:?}", e.scene_id)));
            }
            if !seen.insert(e.scene_id.as_str()) {
                return Err(Error::InvalidData(format!("duplicate scene id {:?}", e.scene_id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::InvalidData(format!(
                    "manifest line {}: expected 4 tab-separated columns, found {}",
                    lineno + 1,
                    cols.len()
                )));
            }
            let point_count = cols[3].parse::<u64>().map_err(|e| {
                Error::InvalidData(format!("manifest line {}: point_count: {e}", lineno + 1))
            })?;
            entries.push(ManifestEntry {
                scene_id: cols[0].to_string(),
                path: PathBuf::from(cols[1]),
                split: cols[2].parse()?,
                point_count,
            });
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.scene_id,
                e.path.display(),
                e.split,
                e.point_count
            ));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::InvalidData(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip_and_counts() {
        let text = "a\ta.crs\ttrain\t10\nb\tb.crs\tval\t20\nc\tc.crs\ttest\t30\nd\td.crs\ttrain\t5\n";
        let m = SceneManifest::parse(text).unwrap();
        assert_eq!(m.to_text(), text);
        assert_eq!(m.count(Split::Train), 2);
        assert_eq!(m.count(Split::Val), 1);
        assert_eq!(m.count(Split::Test), 1);
    }

    #[test]
    fn rejects_duplicates_and_bad_rows() {
        assert!(SceneManifest::parse("a\tx\ttrain\t1\na\ty\ttest\t2\n").is_err());
        assert!(SceneManifest::parse("a\tx\ttrain\n").is_err());
        assert!(SceneManifest::parse("a\tx\tholdout\t1\n").is_err());
    }
}
