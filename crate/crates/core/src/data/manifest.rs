//! Tab-separated dataset manifest.
//!
//! ```text
//! spiking-s4-manifest	1
//! id	clean	noise	noisy	duration	split
//! train-0000	clean/train-0000.wav	noise/train-0000.wav	noisy/train-0000.wav	1.000000	train
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{read_wav, AudioClip};
use crate::error::{Error, Result};

pub const FILE_NAME: &str = "manifest.tsv";
const MAGIC: &str = "spiking-s4-manifest";
const VERSION: u32 = 1;
const COLUMNS: [&str; 6] = ["id", "clean", "noise", "noisy", "duration", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
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
            other => Err(Error::Input(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub clean: PathBuf,
    pub noise: PathBuf,
    pub noisy: PathBuf,
    pub duration: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    /// Records must have unique ids, which also keeps the splits disjoint.
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Input(format!("duplicate clip id `{}`", r.id)));
            }
        }
        Ok(Self { records, root: PathBuf::new() })
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// `(clean, noisy)` audio of one record.
    pub fn load(&self, r: &Record) -> Result<(AudioClip, AudioClip)> {
        let clean = read_wav(&self.resolve(&r.clean))?;
        let noisy = read_wav(&self.resolve(&r.noisy))?;
        if clean.len() != noisy.len() {
            return Err(Error::Input(format!("`{}`: clean and noisy lengths differ", r.id)));
        }
        Ok((clean, noisy))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\t{VERSION}\n{}\n", COLUMNS.join("\t"));
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.6}\t{}\n",
                r.id,
                r.clean.display(),
                r.noise.display(),
                r.noisy.display(),
                r.duration,
                r.split
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, field: &str, detail: String| Error::format(path, format!("line {line}: {field}"), detail);
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "header", "empty file".into()))?;
        match header.split('\t').collect::<Vec<_>>().as_slice() {
            [MAGIC, v] => {
                if v.parse::<u32>().ok() != Some(VERSION) {
                    return Err(bad(1, "version", format!("unsupported manifest version `{v}`")));
                }
            }
            _ => return Err(bad(1, "header", format!("expected `{MAGIC}<TAB>{VERSION}`"))),
        }
        match lines.next() {
            Some((_, cols)) if cols.split('\t').eq(COLUMNS) => {}
            _ => return Err(bad(2, "columns", format!("expected `{}`", COLUMNS.join(" ")))),
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != COLUMNS.len() {
                return Err(bad(n, "columns", format!("expected {} fields, found {}", COLUMNS.len(), f.len())));
            }
            let duration: f64 = f[4].parse().map_err(|_| bad(n, "duration", format!("`{}` is not a number", f[4])))?;
            let split = f[5].parse().map_err(|e: Error| bad(n, "split", e.to_string()))?;
            records.push(Record {
                id: f[0].to_string(),
                clean: f[1].into(),
                noise: f[2].into(),
                noisy: f[3].into(),
                duration,
                split,
            });
        }
        let mut m = Self::new(records).map_err(|e| Error::format(path, "id", e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
