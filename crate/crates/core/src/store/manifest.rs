use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{check_id, Result, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
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
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(StoreError::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// `<id> <split>` lines.
pub fn write_splits(splits: &[(String, Split)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (id, s) in splits {
        let _ = writeln!(out, "{id} {s}");
    }
    fs::write(path, out).map_err(|e| StoreError::io(path, e))
}

pub fn read_splits(path: impl AsRef<Path>) -> Result<Vec<(String, Split)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((id, split)) = line.split_once(' ') else {
            return Err(StoreError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected `<id> <split>`, got {line:?}"),
            });
        };
        check_id(id)?;
        out.push((id.to_string(), split.parse()?));
    }
    Ok(out)
}

/// Where a dataset's pieces live. Relative paths in the file are resolved
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    /// Free-form dataset name, used to look up default hyperparameters.
    pub dataset: Option<String>,
    pub embeddings: PathBuf,
    pub labels: BTreeMap<String, PathBuf>,
    pub pairs: Option<PathBuf>,
    /// Embeddings of reference counterfactuals, when they are not stored
    /// alongside the originals.
    pub references: Option<PathBuf>,
    pub splits: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base, &path.display().to_string())?;
        m.validate()?;
        Ok(m)
    }

    fn parse(text: &str, base: &Path, origin: &str) -> Result<Self> {
        let mut m = DatasetManifest::default();
        let mut have_embeddings = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(StoreError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: format!("expected `<key>=<value>`, got {line:?}"),
                });
            };
            let resolve = |v: &str| base.join(v);
            match key {
                "dataset" => m.dataset = Some(value.to_string()),
                "embeddings" => {
                    m.embeddings = resolve(value);
                    have_embeddings = true;
                }
                "pairs" => m.pairs = Some(resolve(value)),
                "references" => m.references = Some(resolve(value)),
                "splits" => m.splits = Some(resolve(value)),
                k if k.starts_with("label.") => {
                    m.labels
                        .insert(k["label.".len()..].to_string(), resolve(value));
                }
                other => {
                    return Err(StoreError::Parse {
                        path: origin.to_string(),
                        line: i + 1,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        if !have_embeddings {
            return Err(StoreError::Manifest("missing `embeddings=` entry".into()));
        }
        Ok(m)
    }

    /// Every referenced path must exist.
    pub fn validate(&self) -> Result<()> {
        let mut paths: Vec<&Path> = vec![&self.embeddings];
        paths.extend(self.labels.values().map(PathBuf::as_path));
        paths.extend(self.pairs.as_deref());
        paths.extend(self.references.as_deref());
        paths.extend(self.splits.as_deref());
        for p in paths {
            if !p.exists() {
                return Err(StoreError::Manifest(format!(
                    "referenced path {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Writes the manifest with paths made relative to `path`'s directory
    /// when possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &Path| -> String { p.strip_prefix(base).unwrap_or(p).display().to_string() };
        let mut out = String::new();
        if let Some(d) = &self.dataset {
            let _ = writeln!(out, "dataset={d}");
        }
        let _ = writeln!(out, "embeddings={}", rel(&self.embeddings));
        for (name, p) in &self.labels {
            let _ = writeln!(out, "label.{name}={}", rel(p));
        }
        if let Some(p) = &self.pairs {
            let _ = writeln!(out, "pairs={}", rel(p));
        }
        if let Some(p) = &self.references {
            let _ = writeln!(out, "references={}", rel(p));
        }
        if let Some(p) = &self.splits {
            let _ = writeln!(out, "splits={}", rel(p));
        }
        fs::write(path, out).map_err(|e| StoreError::io(path, e))
    }

    pub fn label_path(&self, name: &str) -> Result<&Path> {
        self.labels
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| StoreError::Manifest(format!("no label file for {name:?}")))
    }
}
