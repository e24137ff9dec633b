//! Failure categories and their exit codes.

use std::fmt;

use cfrep_core::cfr::CfrError;
use cfrep_core::classify::ClassifyError;
use cfrep_core::eeec::EeecError;
use cfrep_core::erasure::ErasureError;
use cfrep_core::explicit_cf::ExplicitError;
use cfrep_core::metrics::MetricError;
use cfrep_core::scm::ScmError;
use cfrep_core::store::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numeric,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Self::new(Kind::Config, anyhow::anyhow!("{msg}"))
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Self::new(Kind::Data, anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CmdResult<T> = Result<T, Failure>;

/// Re-tags any error with an explicit category and context message.
pub trait Tag<T> {
    fn tag(self, kind: Kind, context: &str) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn tag(self, kind: Kind, context: &str) -> CmdResult<T> {
        self.map_err(|e| Failure::new(kind, e.into().context(context.to_string())))
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::new(Kind::Data, e)
    }
}

impl From<ErasureError> for Failure {
    fn from(e: ErasureError) -> Self {
        let kind = match e {
            ErasureError::SvdFailed => Kind::Numeric,
            ErasureError::BadTolerance(_) => Kind::Config,
            _ => Kind::Data,
        };
        Failure::new(kind, e)
    }
}

impl From<CfrError> for Failure {
    fn from(e: CfrError) -> Self {
        let kind = match e {
            CfrError::Singular { .. } | CfrError::Divergence { .. } => Kind::Numeric,
            CfrError::BadLambda(_) | CfrError::BadSgdConfig(_) => Kind::Config,
            _ => Kind::Data,
        };
        Failure::new(kind, e)
    }
}

impl From<ClassifyError> for Failure {
    fn from(e: ClassifyError) -> Self {
        let kind = match e {
            ClassifyError::BadConfig(_) => Kind::Config,
            _ => Kind::Data,
        };
        Failure::new(kind, e)
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        let kind = match e {
            MetricError::BadGrid(_) => Kind::Config,
            _ => Kind::Data,
        };
        Failure::new(kind, e)
    }
}

impl From<ScmError> for Failure {
    fn from(e: ScmError) -> Self {
        let kind = match e {
            ScmError::NotPsd { .. } | ScmError::SingularPerp => Kind::Numeric,
            ScmError::Dimension(_) => Kind::Config,
            _ => Kind::Data,
        };
        Failure::new(kind, e)
    }
}

impl From<EeecError> for Failure {
    fn from(e: EeecError) -> Self {
        let kind = match e {
            EeecError::Empty | EeecError::UnchangedAttribute(_) => Kind::Config,
            _ => Kind::Data,
        };
        Failure::new(kind, e)
    }
}

impl From<ExplicitError> for Failure {
    fn from(e: ExplicitError) -> Self {
        match e {
            ExplicitError::Cfr(inner) => inner.into(),
            other => Failure::new(Kind::Data, other),
        }
    }
}
