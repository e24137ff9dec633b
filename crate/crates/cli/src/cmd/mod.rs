//! One function per subcommand.

mod data;
mod eval;
mod fit;
mod words;

pub use data::{convert_glove, gen_eeec, gen_scm};
pub use eval::eval;
pub use fit::{apply_cfr, augment, erase, fit_cfr, train_clf};
pub use words::{baseline_approx, explicit_cf};

use std::fmt::Write as _;

use nalgebra::DMatrix;

/// `name value` lines.
fn summary(lines: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in lines {
        let _ = writeln!(out, "{k} {v}");
    }
    out
}

/// Rows of `a` followed by rows of `b`.
fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

/// Id of the counterfactual of `source` for target value `target`.
pub fn cfr_id(source: &str, target: usize) -> String {
    format!("{source}.cf{target}")
}
