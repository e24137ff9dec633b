//! Evaluation of CFRs through a downstream classifier.
//!
//! Every quantity is computed from per-pair distribution triples: the
//! classifier's output on the factual representation, on the CFR, and (when
//! available) on the representation of a genuine counterfactual text.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use rand_distr::Exp1;
use thiserror::Error;

use nalgebra::DMatrix;

use crate::classify::{argmax, ClassifyError, ProbabilisticClassifier};
use crate::linalg::{mean, ols_slope, pairwise_sum, pearson, std_error};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty pair set")]
    Empty,
    #[error("distribution lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("pair {0} has no reference counterfactual")]
    MissingReference(usize),
    #[error("invalid distribution in pair {0}")]
    InvalidDistribution(usize),
    #[error("need at least {needed} pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("grid fractions must lie in (0, 1], got {0}")]
    BadGrid(f64),
    #[error("y_f and y_t must differ")]
    SameLabel,
    #[error("expected a binary concept, got label {0}")]
    NotBinary(usize),
    #[error("{0} predictions but {1} labels")]
    Misaligned(usize, usize),
}

type Result<T, E = MetricError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct PairEvaluation {
    pub source_id: String,
    pub source_value: usize,
    pub target_value: usize,
    pub p_fact: Vec<f64>,
    pub p_cfr: Vec<f64>,
    pub p_refcf: Option<Vec<f64>>,
}

impl PairEvaluation {
    fn refcf(&self, index: usize) -> Result<&[f64]> {
        self.p_refcf
            .as_deref()
            .ok_or(MetricError::MissingReference(index))
    }

    /// Each present vector is non-negative, sums to one within 1e-6, and
    /// all have the same length.
    pub fn validate(&self, index: usize) -> Result<()> {
        let c = self.p_fact.len();
        let mut all = vec![&self.p_fact, &self.p_cfr];
        all.extend(self.p_refcf.as_ref());
        for p in all {
            if p.len() != c {
                return Err(MetricError::LengthMismatch(c, p.len()));
            }
            let total: f64 = p.iter().sum();
            if p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-6 {
                return Err(MetricError::InvalidDistribution(index));
            }
        }
        Ok(())
    }
}

fn nonempty(evals: &[PairEvaluation]) -> Result<()> {
    if evals.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

fn mean_of(values: &[f64]) -> Result<f64> {
    mean(values).ok_or(MetricError::Empty)
}

/// Runs `clf` on aligned factual, CFR and (optional) reference rows and
/// packs one [`PairEvaluation`] per row.
pub fn evaluate_pairs(
    clf: &dyn ProbabilisticClassifier,
    ids: &[String],
    transitions: &[(usize, usize)],
    x_fact: &DMatrix<f64>,
    x_cfr: &DMatrix<f64>,
    x_ref: Option<&DMatrix<f64>>,
) -> Result<Vec<PairEvaluation>, ClassifyError> {
    let n = ids.len();
    let shapes = [Some(x_fact), Some(x_cfr), x_ref];
    for m in shapes.iter().flatten() {
        if m.nrows() != n {
            return Err(ClassifyError::Misaligned {
                rows: m.nrows(),
                labels: n,
            });
        }
    }
    if transitions.len() != n {
        return Err(ClassifyError::Misaligned {
            rows: n,
            labels: transitions.len(),
        });
    }
    let row = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<f64>>();
    let p_fact = clf.predict_proba_batch(x_fact)?;
    let p_cfr = clf.predict_proba_batch(x_cfr)?;
    let p_ref = x_ref.map(|x| clf.predict_proba_batch(x)).transpose()?;
    Ok((0..n)
        .map(|i| PairEvaluation {
            source_id: ids[i].clone(),
            source_value: transitions[i].0,
            target_value: transitions[i].1,
            p_fact: row(&p_fact, i),
            p_cfr: row(&p_cfr, i),
            p_refcf: p_ref.as_ref().map(|p| row(p, i)),
        })
        .collect())
}

/// Total variation distance `½ Σ |p_i − q_i|`.
pub fn tv(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(MetricError::LengthMismatch(p.len(), q.len()));
    }
    let diffs: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).abs()).collect();
    Ok(0.5 * pairwise_sum(&diffs))
}

/// Per-pair indicator that the CFR and the reference share a predicted label.
pub fn pip_values(evals: &[PairEvaluation]) -> Result<Vec<f64>> {
    nonempty(evals)?;
    evals
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let same = argmax(e.refcf(i)?) == argmax(&e.p_cfr);
            Ok(if same { 1.0 } else { 0.0 })
        })
        .collect()
}

/// Proportion of identical predictions.
pub fn pip(evals: &[PairEvaluation]) -> Result<f64> {
    mean_of(&pip_values(evals)?)
}

pub fn tv_values(evals: &[PairEvaluation]) -> Result<Vec<f64>> {
    nonempty(evals)?;
    evals
        .iter()
        .enumerate()
        .map(|(i, e)| tv(e.refcf(i)?, &e.p_cfr))
        .collect()
}

/// Average TV between reference and CFR distributions.
pub fn atv(evals: &[PairEvaluation]) -> Result<f64> {
    mean_of(&tv_values(evals)?)
}

/// Estimated individual effect `TV(p_cfr, p_fact)`.
pub fn te_hat(e: &PairEvaluation) -> Result<f64> {
    tv(&e.p_cfr, &e.p_fact)
}

/// Reference individual effect `TV(p_refcf, p_fact)`.
pub fn te_ref(e: &PairEvaluation) -> Result<f64> {
    tv(e.refcf(0)?, &e.p_fact)
}

pub fn te_hat_values(evals: &[PairEvaluation]) -> Result<Vec<f64>> {
    nonempty(evals)?;
    evals.iter().map(te_hat).collect()
}

pub fn te_ref_values(evals: &[PairEvaluation]) -> Result<Vec<f64>> {
    nonempty(evals)?;
    evals
        .iter()
        .enumerate()
        .map(|(i, e)| tv(e.refcf(i)?, &e.p_fact))
        .collect()
}

pub fn ate_hat(evals: &[PairEvaluation]) -> Result<f64> {
    mean_of(&te_hat_values(evals)?)
}

pub fn ate_ref(evals: &[PairEvaluation]) -> Result<f64> {
    mean_of(&te_ref_values(evals)?)
}

fn expected_score(p: &[f64], scores: &[f64]) -> Result<f64> {
    if p.len() != scores.len() {
        return Err(MetricError::LengthMismatch(p.len(), scores.len()));
    }
    let terms: Vec<f64> = p.iter().zip(scores).map(|(a, s)| a * s).collect();
    Ok(pairwise_sum(&terms))
}

fn ate_score_impl(
    evals: &[PairEvaluation],
    scores: &[f64],
    reference: bool,
) -> Result<BTreeMap<(usize, usize), f64>> {
    nonempty(evals)?;
    let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (i, e) in evals.iter().enumerate() {
        let after = if reference { e.refcf(i)? } else { &e.p_cfr };
        let diff = expected_score(after, scores)? - expected_score(&e.p_fact, scores)?;
        groups
            .entry((e.source_value, e.target_value))
            .or_default()
            .push(diff);
    }
    groups
        .into_iter()
        .map(|(k, v)| Ok((k, mean_of(&v)?)))
        .collect()
}

/// Mean change of the expected rating `Σ p_i·scores_i` per transition
/// `(source_value, target_value)`. Transitions without pairs are absent.
pub fn ate_score(
    evals: &[PairEvaluation],
    scores: &[f64],
) -> Result<BTreeMap<(usize, usize), f64>> {
    ate_score_impl(evals, scores, false)
}

pub fn ate_score_ref(
    evals: &[PairEvaluation],
    scores: &[f64],
) -> Result<BTreeMap<(usize, usize), f64>> {
    ate_score_impl(evals, scores, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    Cosine,
    NormDiff,
    L2,
}

impl Distance {
    pub const ALL: [Distance; 3] = [Distance::Cosine, Distance::NormDiff, Distance::L2];

    pub fn as_str(self) -> &'static str {
        match self {
            Distance::Cosine => "cosine",
            Distance::NormDiff => "normdiff",
            Distance::L2 => "l2",
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Distance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Distance::Cosine),
            "normdiff" => Ok(Distance::NormDiff),
            "l2" => Ok(Distance::L2),
            other => Err(format!("unknown distance {other:?} (cosine|normdiff|l2)")),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    let sq: Vec<f64> = v.iter().map(|a| a * a).collect();
    pairwise_sum(&sq).sqrt()
}

/// Distance between two effect vectors. Cosine distance is 0 for two zero
/// vectors and 1 when exactly one of them is zero.
pub fn distance(u: &[f64], v: &[f64], dist: Distance) -> Result<f64> {
    if u.len() != v.len() {
        return Err(MetricError::LengthMismatch(u.len(), v.len()));
    }
    Ok(match dist {
        Distance::L2 => {
            let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
            norm(&diff)
        }
        Distance::NormDiff => (norm(u) - norm(v)).abs(),
        Distance::Cosine => {
            let (nu, nv) = (norm(u), norm(v));
            match (nu == 0.0, nv == 0.0) {
                _ if u == v => 0.0,
                (true, true) => 0.0,
                (true, false) | (false, true) => 1.0,
                _ => {
                    let prods: Vec<f64> = u.iter().zip(v).map(|(a, b)| a * b).collect();
                    1.0 - (pairwise_sum(&prods) / (nu * nv)).clamp(-1.0, 1.0)
                }
            }
        }
    })
}

fn effect(after: &[f64], before: &[f64]) -> Vec<f64> {
    after.iter().zip(before).map(|(a, b)| a - b).collect()
}

pub fn icace_values(evals: &[PairEvaluation], dist: Distance) -> Result<Vec<f64>> {
    nonempty(evals)?;
    evals
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let reference = effect(e.refcf(i)?, &e.p_fact);
            let estimate = effect(&e.p_cfr, &e.p_fact);
            distance(&reference, &estimate, dist)
        })
        .collect()
}

/// Mean distance between reference and estimated effect vectors.
pub fn icace_error(evals: &[PairEvaluation], dist: Distance) -> Result<f64> {
    mean_of(&icace_values(evals, dist)?)
}

/// Uniform draw from the probability simplex (Dirichlet with unit
/// concentration).
pub fn random_simplex<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..c).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total = pairwise_sum(&e);
    e.into_iter().map(|v| v / total).collect()
}

/// ICaCE error of an explainer whose estimated effect is the difference of
/// two independent uniform-simplex vectors.
pub fn random_explainer_values<R: Rng + ?Sized>(
    evals: &[PairEvaluation],
    dist: Distance,
    rng: &mut R,
) -> Result<Vec<f64>> {
    nonempty(evals)?;
    evals
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let reference = effect(e.refcf(i)?, &e.p_fact);
            let c = reference.len();
            let a = random_simplex(c, rng);
            let b = random_simplex(c, rng);
            distance(&reference, &effect(&a, &b), dist)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedPoint {
    pub fraction: f64,
    pub n: usize,
    pub atv: f64,
    pub ate: f64,
    pub ate_hat: f64,
    /// Missing when TE or T̂E is constant on the prefix.
    pub rho: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedAnalysisReport {
    /// Pair indices, ascending TV between reference and CFR distributions.
    pub order: Vec<usize>,
    pub points: Vec<NestedPoint>,
    /// Largest prefix fraction (over all prefix lengths) with ρ > 0.75.
    pub strong_fraction: Option<f64>,
    /// Largest prefix fraction with ρ > 0.5.
    pub moderate_fraction: Option<f64>,
}

/// Standard grid 0.05, 0.10, …, 1.00.
pub fn default_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

/// Prefix length for a fraction of `total` pairs.
pub fn prefix_len(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64).ceil() as usize).clamp(1, total)
}

/// Running Pearson correlation of every prefix, in order.
fn prefix_correlations(x: &[f64], y: &[f64]) -> Vec<Option<f64>> {
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(x.len());
    for (i, (&a, &b)) in x.iter().zip(y).enumerate() {
        let n = (i + 1) as f64;
        let da = a - mx;
        let db = b - my;
        mx += da / n;
        my += db / n;
        sxx += da * (a - mx);
        syy += db * (b - my);
        sxy += da * (b - my);
        out.push(if sxx > 0.0 && syy > 0.0 {
            Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
        } else {
            None
        });
    }
    out
}

/// Nested prefixes of the pairs ordered by how well the CFR matches the
/// reference. Ties in the ordering key are broken by TE, then T̂E, so the
/// result does not depend on the input order.
pub fn nested_analysis(evals: &[PairEvaluation], grid: &[f64]) -> Result<NestedAnalysisReport> {
    if evals.len() < 3 {
        return Err(MetricError::TooFewPairs {
            needed: 3,
            got: evals.len(),
        });
    }
    for &f in grid {
        if !(f > 0.0 && f <= 1.0) {
            return Err(MetricError::BadGrid(f));
        }
    }
    let key = tv_values(evals)?;
    let te = te_ref_values(evals)?;
    let te_h = te_hat_values(evals)?;
    let mut order: Vec<usize> = (0..evals.len()).collect();
    order.sort_by(|&a, &b| {
        key[a]
            .total_cmp(&key[b])
            .then(te[a].total_cmp(&te[b]))
            .then(te_h[a].total_cmp(&te_h[b]))
    });
    let key_s: Vec<f64> = order.iter().map(|&i| key[i]).collect();
    let te_s: Vec<f64> = order.iter().map(|&i| te[i]).collect();
    let te_hs: Vec<f64> = order.iter().map(|&i| te_h[i]).collect();
    let n = evals.len();
    let points = grid
        .iter()
        .map(|&f| {
            let m = prefix_len(f, n);
            NestedPoint {
                fraction: f,
                n: m,
                atv: mean(&key_s[..m]).unwrap_or(0.0),
                ate: mean(&te_s[..m]).unwrap_or(0.0),
                ate_hat: mean(&te_hs[..m]).unwrap_or(0.0),
                rho: pearson(&te_s[..m], &te_hs[..m]),
                alpha: ols_slope(&te_s[..m], &te_hs[..m]),
            }
        })
        .collect();
    let rhos = prefix_correlations(&te_s, &te_hs);
    let largest = |threshold: f64| {
        rhos.iter()
            .rposition(|r| r.is_some_and(|v| v > threshold))
            .map(|i| (i + 1) as f64 / n as f64)
    };
    Ok(NestedAnalysisReport {
        order,
        points,
        strong_fraction: largest(0.75),
        moderate_fraction: largest(0.5),
    })
}

/// One row per grid point.
pub fn nested_csv(report: &NestedAnalysisReport) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    let mut out = String::from("fraction,n,atv,ate,ate_hat,rho,alpha\n");
    for p in &report.points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.fraction,
            p.n,
            p.atv,
            p.ate,
            p.ate_hat,
            opt(p.rho),
            opt(p.alpha)
        );
    }
    out
}

fn check_aligned(lens: &[usize]) -> Result<()> {
    if let Some(&first) = lens.first() {
        if let Some(&bad) = lens.iter().find(|&&l| l != first) {
            return Err(MetricError::Misaligned(first, bad));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiRate {
    pub numerator: usize,
    pub denominator: usize,
}

impl PiRate {
    pub fn rate(&self) -> Option<f64> {
        (self.denominator > 0).then(|| self.numerator as f64 / self.denominator as f64)
    }
}

/// Among items with concept value `z` whose CFR is classified correctly as
/// `y_t`, the share whose factual representation was classified `y_f`.
pub fn pi_rate(
    pred_fact: &[usize],
    pred_cfr: &[usize],
    y: &[usize],
    z: &[usize],
    z_value: usize,
    y_f: usize,
    y_t: usize,
) -> Result<PiRate> {
    if y_f == y_t {
        return Err(MetricError::SameLabel);
    }
    check_aligned(&[pred_fact.len(), pred_cfr.len(), y.len(), z.len()])?;
    let mut numerator = 0;
    let mut denominator = 0;
    for i in 0..y.len() {
        if z[i] == z_value && pred_cfr[i] == y_t && y[i] == y_t {
            denominator += 1;
            if pred_fact[i] == y_f {
                numerator += 1;
            }
        }
    }
    Ok(PiRate {
        numerator,
        denominator,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiMax {
    pub y_f: usize,
    pub y_t: usize,
    pub rate: f64,
    pub counts: PiRate,
}

/// Largest rate over ordered label pairs; the lexicographically first pair
/// wins ties, pairs with an empty denominator are skipped.
pub fn pi_max(
    pred_fact: &[usize],
    pred_cfr: &[usize],
    y: &[usize],
    z: &[usize],
    z_value: usize,
    n_classes: usize,
) -> Result<Option<PiMax>> {
    let mut best: Option<PiMax> = None;
    for y_f in 0..n_classes {
        for y_t in 0..n_classes {
            if y_f == y_t {
                continue;
            }
            let counts = pi_rate(pred_fact, pred_cfr, y, z, z_value, y_f, y_t)?;
            if let Some(rate) = counts.rate() {
                if best.is_none_or(|b| rate > b.rate) {
                    best = Some(PiMax {
                        y_f,
                        y_t,
                        rate,
                        counts,
                    });
                }
            }
        }
    }
    Ok(best)
}

/// `gap[y] = TPR(z=0, y) − TPR(z=1, y)`; the gap for `z = 1` is the
/// negation. `None` when one of the groups has no items of class `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct TprGaps {
    pub gaps: Vec<Option<f64>>,
}

impl TprGaps {
    pub fn gap(&self, z: usize, y: usize) -> Option<f64> {
        self.gaps[y].map(|g| if z == 0 { g } else { -g })
    }
}

pub fn tpr_gap(pred: &[usize], y: &[usize], z: &[usize], n_classes: usize) -> Result<TprGaps> {
    check_aligned(&[pred.len(), y.len(), z.len()])?;
    let mut hits = vec![[0usize; 2]; n_classes];
    let mut totals = vec![[0usize; 2]; n_classes];
    for i in 0..y.len() {
        if z[i] > 1 {
            return Err(MetricError::NotBinary(z[i]));
        }
        totals[y[i]][z[i]] += 1;
        if pred[i] == y[i] {
            hits[y[i]][z[i]] += 1;
        }
    }
    let gaps = (0..n_classes)
        .map(|c| {
            if totals[c][0] == 0 || totals[c][1] == 0 {
                log::warn!("class {c} is absent for one concept value; TPR gap undefined");
                return None;
            }
            let t0 = hits[c][0] as f64 / totals[c][0] as f64;
            let t1 = hits[c][1] as f64 / totals[c][1] as f64;
            Some(t0 - t1)
        })
        .collect();
    Ok(TprGaps { gaps })
}

/// `Σ w_y |gap_y| / Σ w_y` over classes with a defined gap.
pub fn tpr_gap_weighted(gaps: &TprGaps, weights: &[f64]) -> Result<f64> {
    if gaps.gaps.len() != weights.len() {
        return Err(MetricError::LengthMismatch(gaps.gaps.len(), weights.len()));
    }
    let mut num = Vec::new();
    let mut den = Vec::new();
    for (g, &w) in gaps.gaps.iter().zip(weights) {
        if let Some(g) = g {
            num.push(w * g.abs());
            den.push(w);
        }
    }
    let total = pairwise_sum(&den);
    if den.is_empty() || total == 0.0 {
        return Err(MetricError::Empty);
    }
    Ok(pairwise_sum(&num) / total)
}

/// Pearson correlation and OLS slope of the `z = 0` gaps against the
/// per-class fraction of `z = 0` items, over classes with a defined gap.
pub fn tpr_gap_correlation(gaps: &TprGaps, fractions: &[f64]) -> Result<Option<(f64, f64)>> {
    if gaps.gaps.len() != fractions.len() {
        return Err(MetricError::LengthMismatch(
            gaps.gaps.len(),
            fractions.len(),
        ));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = gaps
        .gaps
        .iter()
        .zip(fractions)
        .filter_map(|(g, &f)| g.map(|g| (f, g)))
        .unzip();
    Ok(pearson(&xs, &ys).zip(ols_slope(&xs, &ys)))
}

/// One line of a machine-readable report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricLine {
    pub metric: String,
    pub params: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

impl MetricLine {
    pub fn new(metric: &str, params: &str, value: f64, stderr: Option<f64>) -> Self {
        Self {
            metric: metric.to_string(),
            params: if params.is_empty() {
                "-".into()
            } else {
                params.to_string()
            },
            value,
            stderr,
        }
    }

    /// Mean and standard error of per-pair values.
    pub fn from_values(metric: &str, params: &str, values: &[f64]) -> Result<Self> {
        Ok(Self::new(
            metric,
            params,
            mean_of(values)?,
            std_error(values),
        ))
    }
}

/// `metric params value stderr` lines; a missing stderr is written as `-`.
pub fn format_report(lines: &[MetricLine]) -> String {
    let mut out = String::new();
    for l in lines {
        let se = l.stderr.map_or("-".to_string(), |s| format!("{s}"));
        let _ = writeln!(out, "{} {} {} {}", l.metric, l.params, l.value, se);
    }
    out
}
