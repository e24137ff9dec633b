use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{check_id, Result, StoreError};

/// Categorical labels (a concept Z or a task Y) over a set of ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    name: String,
    values: Vec<String>,
    ids: Vec<String>,
    assignments: Vec<usize>,
}

impl LabelVector {
    pub fn new(
        name: impl Into<String>,
        values: Vec<String>,
        ids: Vec<String>,
        assignments: Vec<usize>,
    ) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(StoreError::InvalidCategory(name));
        }
        if values.is_empty() {
            return Err(StoreError::Shape(
                "label vector needs at least one value".into(),
            ));
        }
        let mut seen = HashSet::new();
        for v in &values {
            if v.is_empty() || v.contains(',') || v.contains('\n') || v.trim() != v {
                return Err(StoreError::InvalidCategory(v.clone()));
            }
            if !seen.insert(v.as_str()) {
                return Err(StoreError::DuplicateCategory(v.clone()));
            }
        }
        if ids.len() != assignments.len() {
            return Err(StoreError::Shape(format!(
                "{} ids for {} assignments",
                ids.len(),
                assignments.len()
            )));
        }
        let mut seen_ids = HashSet::new();
        for (id, &a) in ids.iter().zip(&assignments) {
            check_id(id)?;
            if !seen_ids.insert(id.as_str()) {
                return Err(StoreError::DuplicateId(id.clone()));
            }
            if a >= values.len() {
                return Err(StoreError::UnknownCategory {
                    id: id.clone(),
                    index: a,
                    k: values.len(),
                });
            }
        }
        Ok(Self {
            name,
            values,
            ids,
            assignments,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    /// Number of categories.
    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .map(|i| self.assignments[i])
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .zip(&self.assignments)
            .map(|(id, &a)| (id.as_str(), a))
            .collect()
    }

    /// Assignments reordered to follow `ids`; every id must be labelled.
    pub fn aligned<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<usize>> {
        let index = self.index();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_ref())
                    .copied()
                    .ok_or_else(|| StoreError::UnknownId(id.as_ref().to_string()))
            })
            .collect()
    }

    /// Restriction to the given ids, in that order.
    pub fn select<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let assignments = self.aligned(ids)?;
        Self::new(
            self.name.clone(),
            self.values.clone(),
            ids.iter().map(|s| s.as_ref().to_string()).collect(),
            assignments,
        )
    }

    /// Per-category counts.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k()];
        for &a in &self.assignments {
            c[a] += 1;
        }
        c
    }
}

pub fn write_labels(labels: &LabelVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "#label {} k={} values={}",
        labels.name,
        labels.k(),
        labels.values.join(",")
    );
    for (id, a) in labels.ids.iter().zip(&labels.assignments) {
        let _ = writeln!(out, "{id} {a}");
    }
    fs::write(path, out).map_err(|e| StoreError::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVector> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    parse_labels(&text, &path.display().to_string())
}

fn parse_labels(text: &str, origin: &str) -> Result<LabelVector> {
    let err = |line: usize, msg: String| StoreError::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty label file".into()))?;
    let rest = header
        .strip_prefix("#label ")
        .ok_or_else(|| err(1, "expected `#label <name> k=<k> values=<list>`".into()))?;
    let mut parts = rest.splitn(3, ' ');
    let name = parts.next().unwrap_or_default();
    let k: usize = parts
        .next()
        .and_then(|s| s.strip_prefix("k="))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err(1, "missing or invalid k=".into()))?;
    let values: Vec<String> = parts
        .next()
        .and_then(|s| s.strip_prefix("values="))
        .ok_or_else(|| err(1, "missing values=".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    if values.len() != k {
        return Err(err(1, format!("k={k} but {} values listed", values.len())));
    }
    let mut ids = Vec::new();
    let mut assignments = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut it = line.split(' ');
        let (Some(id), Some(idx), None) = (it.next(), it.next(), it.next()) else {
            return Err(err(
                lineno + 1,
                format!("expected `<id> <index>`, got {line:?}"),
            ));
        };
        let idx: usize = idx
            .parse()
            .map_err(|_| err(lineno + 1, format!("invalid index {idx:?}")))?;
        ids.push(id.to_string());
        assignments.push(idx);
    }
    LabelVector::new(name, values, ids, assignments)
}
