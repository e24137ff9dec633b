use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{check_id, EmbeddingSet, LabelVector, Result, StoreError};

/// One (document, counterfactual value) couple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub source_id: String,
    pub target: usize,
    /// Id of the representation of a genuine counterfactual text, if any.
    pub reference_id: Option<String>,
    /// Identity pairs (target equal to the factual value) are only allowed
    /// when flagged.
    pub identity: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvalPairSet {
    pub pairs: Vec<EvalPair>,
}

impl EvalPairSet {
    pub fn new(pairs: Vec<EvalPair>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks targets against the concept labels and references against the
    /// companion embedding set.
    pub fn validate(&self, labels: &LabelVector, companion: Option<&EmbeddingSet>) -> Result<()> {
        let index = labels.index();
        let ids = companion.map(EmbeddingSet::id_index);
        for p in &self.pairs {
            let &factual = index
                .get(p.source_id.as_str())
                .ok_or_else(|| StoreError::UnknownId(p.source_id.clone()))?;
            if p.target >= labels.k() {
                return Err(StoreError::InvalidPair(format!(
                    "target {} out of range for k={} ({})",
                    p.target,
                    labels.k(),
                    p.source_id
                )));
            }
            if p.target == factual && !p.identity {
                return Err(StoreError::InvalidPair(format!(
                    "target equals factual value for {} (flag it as identity)",
                    p.source_id
                )));
            }
            if let (Some(r), Some(ids)) = (&p.reference_id, &ids) {
                if !ids.contains_key(r.as_str()) {
                    return Err(StoreError::UnknownId(r.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Line format: `<source_id> <target_index> <reference_id|-> [identity]`.
pub fn write_pairs(set: &EvalPairSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("#pairs\n");
    for p in &set.pairs {
        let r = p.reference_id.as_deref().unwrap_or("-");
        let _ = write!(out, "{} {} {}", p.source_id, p.target, r);
        if p.identity {
            out.push_str(" identity");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| StoreError::io(path, e))
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<EvalPairSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    let origin = path.display().to_string();
    let err = |line: usize, msg: String| StoreError::Parse {
        path: origin.clone(),
        line,
        msg,
    };
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(err(i + 1, format!("expected 3 or 4 fields, got {line:?}")));
        }
        check_id(fields[0])?;
        let target = fields[1]
            .parse()
            .map_err(|_| err(i + 1, format!("invalid target {:?}", fields[1])))?;
        let reference_id = (fields[2] != "-").then(|| fields[2].to_string());
        let identity = match fields.get(3) {
            None => false,
            Some(&"identity") => true,
            Some(other) => return Err(err(i + 1, format!("unknown flag {other:?}"))),
        };
        pairs.push(EvalPair {
            source_id: fields[0].to_string(),
            target,
            reference_id,
            identity,
        });
    }
    Ok(EvalPairSet { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> LabelVector {
        LabelVector::new(
            "g",
            vec!["f".into(), "m".into()],
            vec!["a".into(), "b".into()],
            vec![0, 1],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_and_validate() {
        let set = EvalPairSet::new(vec![
            EvalPair {
                source_id: "a".into(),
                target: 1,
                reference_id: Some("a-cf".into()),
                identity: false,
            },
            EvalPair {
                source_id: "b".into(),
                target: 1,
                reference_id: None,
                identity: true,
            },
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        write_pairs(&set, &path).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), set);

        let emb = EmbeddingSet::new(vec!["a".into(), "b".into(), "a-cf".into()], 1, vec![0.0; 3])
            .unwrap();
        set.validate(&labels(), Some(&emb)).unwrap();
        let emb_missing = EmbeddingSet::new(vec!["a".into(), "b".into()], 1, vec![0.0; 2]).unwrap();
        assert!(set.validate(&labels(), Some(&emb_missing)).is_err());
    }

    #[test]
    fn unflagged_identity_pair_is_rejected() {
        let set = EvalPairSet::new(vec![EvalPair {
            source_id: "a".into(),
            target: 0,
            reference_id: None,
            identity: false,
        }]);
        assert!(matches!(
            set.validate(&labels(), None),
            Err(StoreError::InvalidPair(_))
        ));
    }
}
