//! Word-level explicit counterfactuals: the vocabulary word nearest to a
//! word's CFR, among words that are not closer to the original word.

use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cfr::{counterfactual, CfrError, CfrMode, CfrModel};
use crate::erasure::ErasureProjector;
use crate::store::{EmbeddingSet, LabelVector, StoreError};

/// Rows per parallel work item.
const BLOCK: usize = 2048;

#[derive(Debug, Error)]
pub enum ExplicitError {
    #[error("line {line}: {msg}")]
    Glove { line: usize, msg: String },
    #[error("word {0:?} has a zero vector")]
    ZeroVector(String),
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("word {0:?} has no concept label")]
    Unlabeled(String),
    #[error("word {word:?} already has value {value}")]
    SameValue { word: String, value: usize },
    #[error("model expects d={expected}, vocabulary has d={got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Cfr(#[from] CfrError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

type Result<T, E = ExplicitError> = std::result::Result<T, E>;

/// Which words may be returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExclusionRule {
    /// A candidate must be at least as close to the CFR as to the original.
    #[default]
    PerCandidate,
    /// A candidate must be at least as far from the original as the CFR is.
    RadiusFromOriginal,
}

impl fmt::Display for ExclusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExclusionRule::PerCandidate => "per-candidate",
            ExclusionRule::RadiusFromOriginal => "radius",
        })
    }
}

impl FromStr for ExclusionRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per-candidate" => Ok(ExclusionRule::PerCandidate),
            "radius" => Ok(ExclusionRule::RadiusFromOriginal),
            other => Err(format!(
                "unknown exclusion rule {other:?} (per-candidate|radius)"
            )),
        }
    }
}

/// Unit-normalized word vectors with optional concept labels.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    vectors: EmbeddingSet,
    labels: Option<LabelVector>,
}

impl Vocabulary {
    /// Normalizes every row to unit L2 norm.
    pub fn from_embeddings(set: &EmbeddingSet) -> Result<Self> {
        let d = set.dim();
        let mut data = Vec::with_capacity(set.data().len());
        for (i, id) in set.ids().iter().enumerate() {
            let row = set.row(i);
            let norm = row
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(ExplicitError::ZeroVector(id.clone()));
            }
            data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
        }
        Ok(Self {
            vectors: EmbeddingSet::new(set.ids().to_vec(), d, data)?,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: LabelVector) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn words(&self) -> &[String] {
        self.vectors.ids()
    }

    pub fn vectors(&self) -> &EmbeddingSet {
        &self.vectors
    }

    pub fn labels(&self) -> Option<&LabelVector> {
        self.labels.as_ref()
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.vectors.position(word)
    }
}

/// Parses `word v1 … vd` lines. Every row must have the dimension of the
/// first one.
pub fn parse_glove<R: BufRead>(reader: R) -> Result<EmbeddingSet> {
    let mut words = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| ExplicitError::Glove {
            line: lineno,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let word = fields.next().unwrap_or_default();
        let values = fields
            .map(|f| {
                f.parse::<f32>().map_err(|_| ExplicitError::Glove {
                    line: lineno,
                    msg: format!("invalid number {f:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(ExplicitError::Glove {
                    line: lineno,
                    msg: format!("expected {d} values, found {}", values.len()),
                })
            }
            _ => {}
        }
        if values.is_empty() {
            return Err(ExplicitError::Glove {
                line: lineno,
                msg: "no values".into(),
            });
        }
        words.push(word.to_string());
        data.extend(values);
    }
    let Some(d) = dim else {
        return Err(ExplicitError::Glove {
            line: 0,
            msg: "empty file".into(),
        });
    };
    Ok(EmbeddingSet::new(words, d, data)?)
}

pub fn read_glove(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_glove(std::io::BufReader::new(file))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExplicitCf {
    Found { word: String, distance: f64 },
    NotFound,
}

fn sq_dist(row: &[f32], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in row.iter().zip(v) {
        let t = f64::from(a) - b;
        s += t * t;
    }
    s
}

/// Index and squared distance of the admissible word nearest to `cfr`;
/// lowest index on ties.
pub fn nearest_admissible(
    vocab: &Vocabulary,
    query: usize,
    cfr: &[f64],
    rule: ExclusionRule,
) -> Option<(usize, f64)> {
    let set = &vocab.vectors;
    let orig: Vec<f64> = set.row(query).iter().map(|&v| f64::from(v)).collect();
    let radius = sq_dist(set.row(query), cfr);
    let n = set.len();
    (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .filter_map(|b| {
            let mut best: Option<(usize, f64)> = None;
            for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
                if i == query {
                    continue;
                }
                let row = set.row(i);
                let to_cfr = sq_dist(row, cfr);
                let admissible = match rule {
                    ExclusionRule::PerCandidate => to_cfr <= sq_dist(row, &orig),
                    ExclusionRule::RadiusFromOriginal => sq_dist(row, &orig) >= radius,
                };
                if admissible && best.is_none_or(|(_, d)| to_cfr < d) {
                    best = Some((i, to_cfr));
                }
            }
            best
        })
        .reduce_with(|a, b| {
            if b.1 < a.1 || (b.1 == a.1 && b.0 < a.0) {
                b
            } else {
                a
            }
        })
}

/// Explicit counterfactual of `word` for concept value `z_target`.
pub fn nearest_explicit_cf(
    vocab: &Vocabulary,
    model: &CfrModel,
    proj: &ErasureProjector,
    word: &str,
    z_target: usize,
    rule: ExclusionRule,
) -> Result<ExplicitCf> {
    if model.dim() != vocab.dim() {
        return Err(ExplicitError::DimensionMismatch {
            expected: model.dim(),
            got: vocab.dim(),
        });
    }
    let query = vocab
        .position(word)
        .ok_or_else(|| ExplicitError::UnknownWord(word.to_string()))?;
    if let Some(labels) = &vocab.labels {
        let value = labels
            .get(word)
            .ok_or_else(|| ExplicitError::Unlabeled(word.to_string()))?;
        if value == z_target {
            return Err(ExplicitError::SameValue {
                word: word.to_string(),
                value,
            });
        }
    }
    let x = vocab.vectors.row_vector(query);
    // deterministic mode draws nothing from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfr: DVector<f64> =
        counterfactual(model, proj, &x, z_target, CfrMode::Deterministic, &mut rng)?;
    Ok(
        match nearest_admissible(vocab, query, cfr.as_slice(), rule) {
            Some((i, d2)) => ExplicitCf::Found {
                word: vocab.words()[i].clone(),
                distance: d2.sqrt(),
            },
            None => ExplicitCf::NotFound,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_vocab(n: usize, d: usize, seed: u64) -> Vocabulary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = (0..n).map(|i| format!("w{i}")).collect();
        let data = (0..n * d)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        Vocabulary::from_embeddings(&EmbeddingSet::new(ids, d, data).unwrap()).unwrap()
    }

    /// Plain double loop: every word against the CFR and the original.
    fn oracle(vocab: &Vocabulary, query: usize, cfr: &[f64], rule: ExclusionRule) -> Option<usize> {
        let set = vocab.vectors();
        let dist = |i: usize, v: &[f64]| -> f64 {
            let mut s = 0.0;
            for j in 0..set.dim() {
                let t = f64::from(set.row(i)[j]) - v[j];
                s += t * t;
            }
            s
        };
        let orig: Vec<f64> = set.row(query).iter().map(|&v| f64::from(v)).collect();
        let mut best: Option<usize> = None;
        for i in 0..set.len() {
            if i == query {
                continue;
            }
            let ok = match rule {
                ExclusionRule::PerCandidate => dist(i, cfr) <= dist(i, &orig),
                ExclusionRule::RadiusFromOriginal => dist(i, &orig) >= dist(query, cfr),
            };
            if ok && best.is_none_or(|b| dist(i, cfr) < dist(b, cfr)) {
                best = Some(i);
            }
        }
        best
    }

    #[test]
    fn normalization_and_glove_parsing() {
        let text = "king 3 4\nqueen 0 2\n";
        let set = parse_glove(text.as_bytes()).unwrap();
        let vocab = Vocabulary::from_embeddings(&set).unwrap();
        assert_eq!(vocab.vectors().row(0), &[0.6, 0.8]);
        for i in 0..vocab.len() {
            let n: f32 = vocab.vectors().row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let err = parse_glove("a 1 2\nb 1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, ExplicitError::Glove { line: 2, .. }));
        assert!(matches!(
            parse_glove("a 1 x\n".as_bytes()).unwrap_err(),
            ExplicitError::Glove { line: 1, .. }
        ));
        let zero = parse_glove("z 0 0\n".as_bytes()).unwrap();
        assert!(matches!(
            Vocabulary::from_embeddings(&zero),
            Err(ExplicitError::ZeroVector(_))
        ));
    }

    #[test]
    fn matches_exhaustive_scan() {
        let vocab = random_vocab(5000, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let q = rng.random_range(0..vocab.len());
            let x = vocab.vectors().row_vector(q);
            let shift = DVector::from_fn(16, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
            let cfr = x + shift;
            for rule in [
                ExclusionRule::PerCandidate,
                ExclusionRule::RadiusFromOriginal,
            ] {
                let got = nearest_admissible(&vocab, q, cfr.as_slice(), rule).map(|(i, _)| i);
                assert_eq!(got, oracle(&vocab, q, cfr.as_slice(), rule));
                assert_ne!(got, Some(q));
            }
        }
    }

    #[test]
    fn ties_go_to_vocabulary_order() {
        let set = EmbeddingSet::new(
            vec!["q".into(), "a".into(), "b".into()],
            2,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let vocab = Vocabulary::from_embeddings(&set).unwrap();
        let got = nearest_admissible(&vocab, 0, &[0.0, 1.0], ExclusionRule::PerCandidate);
        assert_eq!(got.map(|(i, _)| i), Some(1));
        // CFR equal to the original: nothing is strictly closer to it
        assert_eq!(
            nearest_admissible(&vocab, 0, &[1.0, 0.0], ExclusionRule::PerCandidate).map(|(i, _)| i),
            Some(1)
        );
    }

    #[test]
    fn no_candidate_is_reported() {
        let set =
            EmbeddingSet::new(vec!["q".into(), "a".into()], 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let vocab = Vocabulary::from_embeddings(&set).unwrap();
        // CFR pushed away from "a": "a" is closer to the original
        assert_eq!(
            nearest_admissible(&vocab, 0, &[2.0, -1.0], ExclusionRule::PerCandidate),
            None
        );
    }
}
