use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::preprocess;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
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

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

/// One manifest line as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub video_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feature_path: String,
    pub captions: Vec<String>,
    pub split: Split,
}

/// A video with its preprocessed captions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub video_id: String,
    pub feature_path: PathBuf,
    pub captions: Vec<Vec<String>>,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<CaptionRecord>,
    /// Captions that were empty after preprocessing, as (video id, raw text).
    pub skipped: Vec<(String, String)>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaptionRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Manifest::default();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestLine =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        let mut captions = Vec::with_capacity(rec.captions.len());
        for raw in &rec.captions {
            match preprocess(raw) {
                Some(t) => captions.push(t),
                None => out.skipped.push((rec.video_id.clone(), raw.clone())),
            }
        }
        if captions.is_empty() {
            continue;
        }
        out.records.push(CaptionRecord {
            feature_path: base.join(&rec.feature_path),
            video_id: rec.video_id,
            captions,
            split: rec.split,
        });
    }
    if out.records.is_empty() {
        return Err(Error::format(path, "manifest has no usable records"));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, lines: &[ManifestLine]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for l in lines {
        serde_json::to_writer(&mut f, l)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
