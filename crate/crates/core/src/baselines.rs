//! Approximate counterfactuals: another real observation whose predicted
//! concept labels equal those of the genuine counterfactual.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;

use crate::classify::{ClassifyError, ProbabilisticClassifier};

/// Inverted index from predicted label tuple to observation ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AspectIndex {
    labels: BTreeMap<String, Vec<usize>>,
    buckets: BTreeMap<Vec<usize>, Vec<String>>,
}

impl AspectIndex {
    /// Buckets ids by their label tuples; ids keep their input order inside
    /// a bucket.
    pub fn from_labels(ids: &[String], tuples: Vec<Vec<usize>>) -> Self {
        let mut index = Self::default();
        for (id, t) in ids.iter().zip(tuples) {
            index.buckets.entry(t.clone()).or_default().push(id.clone());
            index.labels.insert(id.clone(), t);
        }
        index
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_buckets(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket(&self, labels: &[usize]) -> &[String] {
        self.buckets.get(labels).map_or(&[], Vec::as_slice)
    }

    pub fn labels_of(&self, id: &str) -> Option<&[usize]> {
        self.labels.get(id).map(Vec::as_slice)
    }
}

/// Predicts every concept for every row of `x` and buckets the ids.
pub fn build_aspect_index(
    ids: &[String],
    x: &DMatrix<f64>,
    classifiers: &[&dyn ProbabilisticClassifier],
) -> Result<AspectIndex, ClassifyError> {
    if ids.len() != x.nrows() {
        return Err(ClassifyError::Misaligned {
            rows: x.nrows(),
            labels: ids.len(),
        });
    }
    let mut tuples = vec![Vec::with_capacity(classifiers.len()); ids.len()];
    for clf in classifiers {
        let probs = clf.predict_proba_batch(x)?;
        for (i, t) in tuples.iter_mut().enumerate() {
            let row: Vec<f64> = probs.row(i).iter().copied().collect();
            t.push(crate::classify::argmax(&row));
        }
    }
    Ok(AspectIndex::from_labels(ids, tuples))
}

/// Uniform draw from the bucket for `target_labels`, never `exclude_id`.
/// `None` when nothing is left to draw from.
pub fn approximate_counterfactual<R: Rng + ?Sized>(
    index: &AspectIndex,
    target_labels: &[usize],
    exclude_id: &str,
    rng: &mut R,
) -> Option<String> {
    let candidates: Vec<&String> = index
        .bucket(target_labels)
        .iter()
        .filter(|id| id.as_str() != exclude_id)
        .collect();
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[rng.random_range(0..candidates.len())].clone())
}
