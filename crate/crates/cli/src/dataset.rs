//! Loading a manifest-described dataset and mapping concept values to the
//! indices the fitted models use.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use cfrep_core::store::{
    read_embeddings, read_labels, read_pairs, read_splits, DatasetManifest, EmbeddingSet,
    EvalPairSet, LabelVector, Split,
};

use crate::config::{RunConfig, Setting};
use crate::error::{CmdResult, Failure};
use crate::runlog::RunLog;

/// Value name that marks an unknown concept value in the binary setting.
pub const UNKNOWN: &str = "unknown";

pub struct Dataset {
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    pub embeddings: EmbeddingSet,
    pub concept: LabelVector,
    pub splits: Option<HashMap<String, Split>>,
}

impl Dataset {
    pub fn load(cfg: &RunConfig, log: &mut RunLog) -> CmdResult<Self> {
        let path = cfg.manifest()?.to_path_buf();
        log.input(&path);
        let manifest = DatasetManifest::load(&path)?;
        log.input(&manifest.embeddings);
        let embeddings = read_embeddings(&manifest.embeddings)?;
        let concept_path = manifest.label_path(&cfg.concept)?;
        log.input(concept_path);
        let concept = read_labels(concept_path)?;
        let splits = match &manifest.splits {
            Some(p) => {
                log.input(p);
                Some(read_splits(p)?.into_iter().collect())
            }
            None => None,
        };
        Ok(Self {
            manifest_path: path,
            manifest,
            embeddings,
            concept,
            splits,
        })
    }

    pub fn label(&self, name: &str, log: &mut RunLog) -> CmdResult<LabelVector> {
        if name == self.concept.name() {
            return Ok(self.concept.clone());
        }
        let path = self.manifest.label_path(name)?;
        log.input(path);
        Ok(read_labels(path)?)
    }

    /// Embedding ids in `split`, in file order; every id when the dataset
    /// has no split file.
    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.embeddings
            .ids()
            .iter()
            .filter(|id| {
                self.splits
                    .as_ref()
                    .is_none_or(|s| s.get(id.as_str()) == Some(&split))
            })
            .cloned()
            .collect()
    }

    /// Ids used for fitting: the train split.
    pub fn fit_ids(&self) -> Vec<String> {
        self.ids_in(Split::Train)
    }

    /// Ids used for evaluation: the test split.
    pub fn eval_ids(&self) -> Vec<String> {
        self.ids_in(Split::Test)
    }

    pub fn pairs(&self, log: &mut RunLog) -> CmdResult<EvalPairSet> {
        let path = self.manifest.pairs.as_deref().ok_or_else(|| {
            Failure::data(format!(
                "{} lists no pairs file",
                self.manifest_path.display()
            ))
        })?;
        log.input(path);
        let pairs = read_pairs(path)?;
        Ok(pairs)
    }

    /// Embeddings holding the reference counterfactuals: the `references`
    /// file, or the main embeddings when there is none.
    pub fn references(&self, log: &mut RunLog) -> CmdResult<Option<EmbeddingSet>> {
        match &self.manifest.references {
            Some(p) => {
                log.input(p);
                Ok(Some(read_embeddings(p)?))
            }
            None => Ok(None),
        }
    }
}

/// Correspondence between label values and model indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMap {
    /// Model index to label index.
    pub known: Vec<usize>,
    /// Label index of the unknown value, in the binary setting.
    pub unknown: Option<usize>,
    compact: Vec<Option<usize>>,
}

impl ConceptMap {
    pub fn new(labels: &LabelVector, setting: Setting) -> CmdResult<Self> {
        let k = labels.k();
        let unknown = match setting {
            Setting::Ternary => None,
            Setting::Binary => labels.value_index(UNKNOWN),
        };
        let known: Vec<usize> = (0..k).filter(|&v| Some(v) != unknown).collect();
        if setting == Setting::Binary && known.len() != 2 {
            return Err(Failure::config(format!(
                "binary setting needs exactly two known values of {:?}, found {}",
                labels.name(),
                known.len()
            )));
        }
        if known.len() < 2 {
            return Err(Failure::data(format!(
                "concept {:?} has fewer than two values",
                labels.name()
            )));
        }
        let mut compact = vec![None; k];
        for (m, &v) in known.iter().enumerate() {
            compact[v] = Some(m);
        }
        Ok(Self {
            known,
            unknown,
            compact,
        })
    }

    pub fn k(&self) -> usize {
        self.known.len()
    }

    /// Model index of a label index; `None` for the unknown value.
    pub fn model_index(&self, label: usize) -> Option<usize> {
        self.compact.get(label).copied().flatten()
    }

    /// Ids among `ids` with a known value, and their model indices.
    pub fn known_rows(
        &self,
        labels: &LabelVector,
        ids: &[String],
    ) -> CmdResult<(Vec<String>, Vec<usize>)> {
        let values = labels.aligned(ids)?;
        Ok(ids
            .iter()
            .zip(values)
            .filter_map(|(id, v)| self.model_index(v).map(|m| (id.clone(), m)))
            .unzip())
    }
}

pub fn check_exists(path: &Path, what: &str) -> CmdResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::data(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}
