//! Run configuration: an optional `key = value` file with one section per
//! module (TOML syntax), overridden by command-line flags, falling back to
//! the per-(dataset, concept) defaults table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cfrep_core::cfr::{CfrMode, FitMethod};
use serde::Deserialize;

use crate::error::{CmdResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Setting {
    /// The concept has two values plus an `unknown` one, whose
    /// counterfactual is the guarded part alone.
    Binary,
    #[default]
    Ternary,
}

impl std::str::FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "binary" => Ok(Setting::Binary),
            "ternary" => Ok(Setting::Ternary),
            other => Err(format!("unknown setting {other:?} (binary|ternary)")),
        }
    }
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Binary => "binary",
            Setting::Ternary => "ternary",
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub erasure: ErasureSection,
    #[serde(default)]
    pub cfr: CfrSection,
    #[serde(default)]
    pub classify: ClassifySection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub dataset: Option<String>,
    pub concept: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErasureSection {
    pub rank_tolerance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfrSection {
    pub method: Option<String>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub mode: Option<String>,
    pub setting: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    pub lambda: Option<f64>,
    pub max_iter: Option<usize>,
    pub grad_tol: Option<f64>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CmdResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Failure::config(format!("config {}: {e}", path.display())))
    }
}

/// Hyperparameter defaults keyed by dataset and concept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Defaults {
    pub cfr_lr: f64,
    pub cfr_lambda: f64,
    /// Regularization of a classifier for the task label.
    pub clf_lambda_y: f64,
    /// Regularization of a classifier for the concept itself.
    pub clf_lambda_z: f64,
}

pub const FALLBACK: Defaults = Defaults {
    cfr_lr: 1e-3,
    cfr_lambda: 5e-2,
    clf_lambda_y: 1e-4,
    clf_lambda_z: 1e-5,
};

pub fn defaults(dataset: Option<&str>, concept: &str) -> Defaults {
    match (dataset.map(str::to_ascii_lowercase).as_deref(), concept) {
        (Some("eeec"), "race") => Defaults {
            cfr_lambda: 5e-4,
            ..FALLBACK
        },
        (Some("cebab"), _) => Defaults {
            cfr_lr: 1e-2,
            cfr_lambda: 1e-4,
            clf_lambda_y: 1e-5,
            clf_lambda_z: 1e-5,
        },
        // eeec/gender, biasinbios/gender, glove/gender and anything else
        _ => FALLBACK,
    }
}

/// Global flags as given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: Option<CfrMode>,
    pub setting: Option<Setting>,
    pub concept: Option<String>,
    pub dataset: Option<String>,
}

/// Everything a command needs, fully resolved.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub dataset: Option<String>,
    pub concept: String,
    pub mode: CfrMode,
    pub setting: Setting,
    pub rank_tolerance: f64,
    pub cfr_method: FitMethod,
    pub cfr_lambda: f64,
    pub cfr_lr: f64,
    pub cfr_epochs: usize,
    pub cfr_batch_size: usize,
    pub clf_lambda: Option<f64>,
    pub clf_max_iter: usize,
    pub clf_grad_tol: f64,
    /// Command-specific settings, echoed to the run log.
    pub extra: BTreeMap<String, String>,
}

fn parse_opt<T: std::str::FromStr>(v: Option<&String>, what: &str) -> CmdResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    v.map(|s| {
        s.parse::<T>()
            .map_err(|e| Failure::config(format!("{what}: {e}")))
    })
    .transpose()
}

impl RunConfig {
    pub fn resolve(flags: &Overrides) -> CmdResult<Self> {
        let file = match &flags.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let out = flags
            .out
            .clone()
            .ok_or_else(|| Failure::config("--out is required"))?;
        let dataset = flags.dataset.clone().or(file.data.dataset);
        let concept = flags
            .concept
            .clone()
            .or(file.data.concept)
            .unwrap_or_else(|| "z".to_string());
        let d = defaults(dataset.as_deref(), &concept);
        let mode = match flags.mode {
            Some(m) => m,
            None => parse_opt::<CfrMode>(file.cfr.mode.as_ref(), "cfr.mode")?.unwrap_or_default(),
        };
        let setting = match flags.setting {
            Some(s) => s,
            None => {
                parse_opt::<Setting>(file.cfr.setting.as_ref(), "cfr.setting")?.unwrap_or_default()
            }
        };
        let method = parse_opt::<FitMethod>(file.cfr.method.as_ref(), "cfr.method")?
            .unwrap_or(FitMethod::ClosedForm);
        Ok(Self {
            seed: flags.seed.or(file.seed).unwrap_or(0),
            manifest: flags.manifest.clone().or(file.data.manifest),
            out,
            dataset,
            concept,
            mode,
            setting,
            rank_tolerance: file
                .erasure
                .rank_tolerance
                .unwrap_or(cfrep_core::erasure::DEFAULT_RANK_TOLERANCE),
            cfr_method: method,
            cfr_lambda: file.cfr.lambda.unwrap_or(d.cfr_lambda),
            cfr_lr: file.cfr.lr.unwrap_or(d.cfr_lr),
            cfr_epochs: file.cfr.epochs.unwrap_or(50),
            cfr_batch_size: file.cfr.batch_size.unwrap_or(256),
            clf_lambda: file.classify.lambda,
            clf_max_iter: file.classify.max_iter.unwrap_or(10_000),
            clf_grad_tol: file.classify.grad_tol.unwrap_or(1e-6),
            extra: BTreeMap::new(),
        })
    }

    pub fn manifest(&self) -> CmdResult<&Path> {
        self.manifest.as_deref().ok_or_else(|| {
            Failure::config("a dataset manifest is required (--manifest or [data] manifest)")
        })
    }

    pub fn defaults(&self) -> Defaults {
        defaults(self.dataset.as_deref(), &self.concept)
    }

    /// Classifier regularization: explicit value, else the table entry for
    /// the concept itself or for a task label.
    pub fn clf_lambda_for(&self, label: &str) -> f64 {
        self.clf_lambda.unwrap_or_else(|| {
            let d = self.defaults();
            if label == self.concept {
                d.clf_lambda_z
            } else {
                d.clf_lambda_y
            }
        })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.extra.insert(key.to_string(), value.to_string());
    }

    /// `key = value` lines in a fixed order. The output directory is left
    /// out so that identical runs into different directories log the same.
    pub fn echo(&self) -> String {
        let mut kv: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            (
                "data.manifest".into(),
                self.manifest
                    .as_ref()
                    .map_or("-".into(), |p| p.display().to_string()),
            ),
            (
                "data.dataset".into(),
                self.dataset.clone().unwrap_or_else(|| "-".into()),
            ),
            ("data.concept".into(), self.concept.clone()),
            (
                "erasure.rank_tolerance".into(),
                self.rank_tolerance.to_string(),
            ),
            ("cfr.method".into(), self.cfr_method.as_str().into()),
            ("cfr.lambda".into(), self.cfr_lambda.to_string()),
            ("cfr.lr".into(), self.cfr_lr.to_string()),
            ("cfr.epochs".into(), self.cfr_epochs.to_string()),
            ("cfr.batch_size".into(), self.cfr_batch_size.to_string()),
            ("cfr.mode".into(), format!("{:?}", self.mode).to_lowercase()),
            ("cfr.setting".into(), self.setting.as_str().into()),
            (
                "classify.lambda".into(),
                self.clf_lambda.map_or("default".into(), |l| l.to_string()),
            ),
            ("classify.max_iter".into(), self.clf_max_iter.to_string()),
            ("classify.grad_tol".into(), self.clf_grad_tol.to_string()),
        ];
        kv.extend(
            self.extra
                .iter()
                .map(|(k, v)| (format!("cmd.{k}"), v.clone())),
        );
        kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_lookup() {
        assert_eq!(defaults(Some("EEEC"), "race").cfr_lambda, 5e-4);
        assert_eq!(defaults(Some("eeec"), "gender").cfr_lambda, 5e-2);
        assert_eq!(defaults(Some("cebab"), "food").cfr_lr, 1e-2);
        assert_eq!(defaults(None, "z"), FALLBACK);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "seed = 3\n[data]\nconcept = \"race\"\ndataset = \"eeec\"\n[cfr]\nmethod = \"sgd\"\nepochs = 7\n",
        )
        .unwrap();
        let flags = Overrides {
            config: Some(path.clone()),
            seed: Some(9),
            out: Some(dir.path().into()),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&flags).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.concept, "race");
        assert_eq!(cfg.cfr_method, FitMethod::Sgd);
        assert_eq!(cfg.cfr_epochs, 7);
        assert_eq!(cfg.cfr_lambda, 5e-4);
        assert_eq!(cfg.clf_lambda_for("race"), 1e-5);
        assert_eq!(cfg.clf_lambda_for("y"), 1e-4);

        fs::write(&path, "[cfr]\nwhatever = 1\n").unwrap();
        let err = RunConfig::resolve(&flags).unwrap_err();
        assert_eq!(err.kind, crate::error::Kind::Config);
        let no_out = Overrides::default();
        assert_eq!(
            RunConfig::resolve(&no_out).unwrap_err().kind,
            crate::error::Kind::Config
        );
    }
}
