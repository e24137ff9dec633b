//! Counterfactual representations (CFRs) of embedded text.
//!
//! A CFR replaces the value of a discrete concept `Z` (gender, race, an
//! aspect rating...) directly in representation space. The representation
//! is split into a part that linearly guards `Z` and a small complementary
//! part; the complementary part is then re-predicted from the guarded part
//! by a per-value linear regression.
//!
//! Modules:
//! - [`store`]: embedding containers, label/pair/manifest files
//! - [`erasure`]: cross-covariance, orthogonal erasure projector
//! - [`cfr`]: per-value regressions and counterfactual construction
//! - [`scm`]: Gaussian structural causal model used as a ground truth
//! - [`classify`]: one-vs-all logistic regression and a small MLP
//! - [`metrics`]: PIP, ATV, treatment effects, ICaCE error, Π rates, TPR gaps
//! - [`baselines`]: approximate counterfactuals by label matching
//! - [`eeec`]: template-based synthetic corpus with text counterfactuals
//! - [`explicit_cf`]: nearest-word explicit counterfactuals
//! - [`synthetic`]: seeded fixtures built on the SCM

pub mod baselines;
pub mod cfr;
pub mod classify;
pub mod eeec;
pub mod erasure;
pub mod explicit_cf;
pub mod linalg;
pub mod metrics;
pub mod scm;
pub mod store;
pub mod synthetic;
