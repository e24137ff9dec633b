use std::fmt::Write as _;

use cfrep_core::classify::{argmax, LinearClassifier, ProbabilisticClassifier};
use cfrep_core::metrics::{
    ate_score, ate_score_ref, default_grid, evaluate_pairs, format_report, icace_values,
    nested_analysis, nested_csv, pi_max, pip_values, random_explainer_values, te_hat_values,
    te_ref_values, tpr_gap, tpr_gap_correlation, tpr_gap_weighted, tv_values, MetricLine,
    PairEvaluation,
};
use cfrep_core::store::{read_embeddings, EmbeddingSet};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cfr_id;
use crate::config::RunConfig;
use crate::dataset::{check_exists, ConceptMap, Dataset};
use crate::error::{CmdResult, Failure};
use crate::runlog::{write_report, write_text, RunLog};
use crate::{EvalArgs, Metric};

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Pip => "pip",
        Metric::Atv => "atv",
        Metric::Ate => "ate",
        Metric::AteScore => "ate-score",
        Metric::Error => "error",
        Metric::Pi => "pi",
        Metric::TprGap => "tpr-gap",
        Metric::Nested => "nested",
    }
}

fn needs_reference(m: Metric) -> bool {
    matches!(m, Metric::Atv | Metric::Error | Metric::Nested)
}

/// `metric params value stderr`, with `none` for an undefined value.
fn opt_line(out: &mut String, metric: &str, params: &str, value: Option<f64>) {
    match value {
        Some(v) => out.push_str(&format_report(&[MetricLine::new(metric, params, v, None)])),
        None => {
            let params = if params.is_empty() { "-" } else { params };
            let _ = writeln!(out, "{metric} {params} none -");
        }
    }
}

fn rows_of(set: &EmbeddingSet, ids: &[String], what: &str) -> CmdResult<DMatrix<f64>> {
    let index = set.id_index();
    let mut m = DMatrix::zeros(ids.len(), set.dim());
    for (i, id) in ids.iter().enumerate() {
        let &r = index
            .get(id.as_str())
            .ok_or_else(|| Failure::data(format!("{what} {id:?} not found")))?;
        m.row_mut(i).copy_from(&set.row_vector(r).transpose());
    }
    Ok(m)
}

struct Paired {
    evals: Vec<PairEvaluation>,
    has_refs: bool,
}

fn paired(
    a: &EvalArgs,
    ds: &Dataset,
    clf: &LinearClassifier,
    log: &mut RunLog,
) -> CmdResult<Paired> {
    let name = metric_name(a.metric);
    let cfr_path = a
        .cfr
        .as_ref()
        .ok_or_else(|| Failure::config(format!("metric {name} needs --cfr")))?;
    check_exists(cfr_path, "counterfactual file")?;
    log.input(cfr_path);
    let cfr = read_embeddings(cfr_path)?;
    let pairs = ds.pairs(log)?;
    if pairs.is_empty() {
        return Err(Failure::data("the pairs file is empty"));
    }
    pairs.validate(&ds.concept, None)?;
    let refs = ds.references(log)?;
    let ref_set = refs.as_ref().unwrap_or(&ds.embeddings);

    let sources: Vec<String> = pairs.pairs.iter().map(|p| p.source_id.clone()).collect();
    let cfr_ids: Vec<String> = pairs
        .pairs
        .iter()
        .map(|p| cfr_id(&p.source_id, p.target))
        .collect();
    let values = ds.concept.aligned(&sources)?;
    let transitions: Vec<(usize, usize)> = values
        .iter()
        .zip(&pairs.pairs)
        .map(|(&v, p)| (v, p.target))
        .collect();
    let x_fact = rows_of(&ds.embeddings, &sources, "source")?;
    let x_cfr = rows_of(&cfr, &cfr_ids, "counterfactual")?;
    let missing = pairs.pairs.iter().find(|p| p.reference_id.is_none());
    let x_ref = match missing {
        None => {
            let ref_ids: Vec<String> = pairs
                .pairs
                .iter()
                .filter_map(|p| p.reference_id.clone())
                .collect();
            Some(rows_of(ref_set, &ref_ids, "reference")?)
        }
        Some(p) if needs_reference(a.metric) => {
            return Err(Failure::data(format!(
                "metric {name} needs a reference counterfactual for every pair; {} has none",
                p.source_id
            )))
        }
        Some(_) => None,
    };
    let evals = evaluate_pairs(clf, &sources, &transitions, &x_fact, &x_cfr, x_ref.as_ref())?;
    Ok(Paired {
        has_refs: x_ref.is_some(),
        evals,
    })
}

fn predictions(p: &[f64]) -> usize {
    argmax(p)
}

pub fn eval(mut cfg: RunConfig, a: &EvalArgs) -> CmdResult<()> {
    let mut log = RunLog::new("eval");
    let name = metric_name(a.metric);
    cfg.set("metric", name);
    cfg.set("distance", a.distance);
    if let Some(s) = &a.scores {
        cfg.set(
            "scores",
            s.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
    }
    if let Some(g) = &a.grid {
        cfg.set(
            "grid",
            g.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
    }
    if matches!(a.metric, Metric::Pi | Metric::TprGap) {
        cfg.set("label", &a.label);
    }
    if let Some(z) = &a.z_value {
        cfg.set("z_value", z);
    }
    if a.random_explainer {
        cfg.set("random_explainer", true);
    }
    let ds = Dataset::load(&cfg, &mut log)?;
    check_exists(&a.clf, "classifier")?;
    log.input(&a.clf);
    let clf = LinearClassifier::load(&a.clf)?;
    let values = ds.concept.values().to_vec();

    let mut report = String::new();
    match a.metric {
        Metric::TprGap => {
            report = tpr_gap_report(&cfg, a, &ds, &clf, &mut log)?;
        }
        Metric::Pip => {
            let p = paired(a, &ds, &clf, &mut log)?;
            report.push_str(&format_report(&[MetricLine::from_values(
                "pip",
                "",
                &pip_values(&p.evals)?,
            )?]));
        }
        Metric::Atv => {
            let p = paired(a, &ds, &clf, &mut log)?;
            report.push_str(&format_report(&[MetricLine::from_values(
                "atv",
                "",
                &tv_values(&p.evals)?,
            )?]));
        }
        Metric::Ate => {
            let p = paired(a, &ds, &clf, &mut log)?;
            let mut lines = vec![MetricLine::from_values(
                "ate_hat",
                "",
                &te_hat_values(&p.evals)?,
            )?];
            if p.has_refs {
                lines.push(MetricLine::from_values(
                    "ate_ref",
                    "",
                    &te_ref_values(&p.evals)?,
                )?);
            }
            report.push_str(&format_report(&lines));
        }
        Metric::AteScore => {
            let scores = a
                .scores
                .as_ref()
                .ok_or_else(|| Failure::config("metric ate-score needs --scores"))?;
            if scores.len() != clf.n_classes() {
                return Err(Failure::config(format!(
                    "{} scores given for a classifier with {} classes",
                    scores.len(),
                    clf.n_classes()
                )));
            }
            let p = paired(a, &ds, &clf, &mut log)?;
            let mut lines = Vec::new();
            let params = |(s, t): (usize, usize)| format!("src={},tgt={}", values[s], values[t]);
            for (k, v) in ate_score(&p.evals, scores)? {
                lines.push(MetricLine::new("ate_score", &params(k), v, None));
            }
            if p.has_refs {
                for (k, v) in ate_score_ref(&p.evals, scores)? {
                    lines.push(MetricLine::new("ate_score_ref", &params(k), v, None));
                }
            }
            report.push_str(&format_report(&lines));
        }
        Metric::Error => {
            let p = paired(a, &ds, &clf, &mut log)?;
            let params = format!("distance={}", a.distance);
            let mut lines = vec![MetricLine::from_values(
                "icace_error",
                &params,
                &icace_values(&p.evals, a.distance)?,
            )?];
            if a.random_explainer {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let random = random_explainer_values(&p.evals, a.distance, &mut rng)?;
                lines.push(MetricLine::from_values(
                    "icace_error_random",
                    &params,
                    &random,
                )?);
            }
            report.push_str(&format_report(&lines));
        }
        Metric::Nested => {
            let p = paired(a, &ds, &clf, &mut log)?;
            let grid = a.grid.clone().unwrap_or_else(default_grid);
            let nested = nested_analysis(&p.evals, &grid)?;
            write_text(&cfg.out.join("nested.csv"), &nested_csv(&nested))?;
            log.output("nested.csv");
            opt_line(
                &mut report,
                "nested_strong_fraction",
                "",
                nested.strong_fraction,
            );
            opt_line(
                &mut report,
                "nested_moderate_fraction",
                "",
                nested.moderate_fraction,
            );
            for pt in &nested.points {
                let params = format!("fraction={}", pt.fraction);
                opt_line(&mut report, "nested_atv", &params, Some(pt.atv));
                opt_line(&mut report, "nested_rho", &params, pt.rho);
            }
        }
        Metric::Pi => {
            let p = paired(a, &ds, &clf, &mut log)?;
            let task = ds.label(&a.label, &mut log)?;
            if task.k() != clf.n_classes() {
                return Err(Failure::data(format!(
                    "label {:?} has {} values, the classifier predicts {}",
                    task.name(),
                    task.k(),
                    clf.n_classes()
                )));
            }
            let sources: Vec<&str> = p.evals.iter().map(|e| e.source_id.as_str()).collect();
            let y = task.aligned(&sources)?;
            let pred_fact: Vec<usize> = p.evals.iter().map(|e| predictions(&e.p_fact)).collect();
            let pred_cfr: Vec<usize> = p.evals.iter().map(|e| predictions(&e.p_cfr)).collect();
            let z: Vec<usize> = p.evals.iter().map(|e| e.source_value).collect();
            let selected: Vec<usize> = match &a.z_value {
                Some(v) => vec![ds
                    .concept
                    .value_index(v)
                    .ok_or_else(|| Failure::config(format!("unknown concept value {v:?}")))?],
                None => (0..ds.concept.k()).collect(),
            };
            let classes = task.values();
            for zv in selected {
                match pi_max(&pred_fact, &pred_cfr, &y, &z, zv, clf.n_classes())? {
                    Some(m) => {
                        let params = format!(
                            "z={},y_f={},y_t={},count={}/{}",
                            values[zv],
                            classes[m.y_f],
                            classes[m.y_t],
                            m.counts.numerator,
                            m.counts.denominator
                        );
                        opt_line(&mut report, "pi", &params, Some(m.rate));
                    }
                    None => opt_line(&mut report, "pi", &format!("z={}", values[zv]), None),
                }
            }
        }
    }
    write_report(&cfg, &mut log, &report)?;
    log.write(&cfg)
}

fn tpr_gap_report(
    cfg: &RunConfig,
    a: &EvalArgs,
    ds: &Dataset,
    clf: &LinearClassifier,
    log: &mut RunLog,
) -> CmdResult<String> {
    let map = ConceptMap::new(&ds.concept, cfg.setting)?;
    if map.k() != 2 {
        return Err(Failure::config(format!(
            "tpr-gap needs a concept with two known values, {:?} has {}",
            ds.concept.name(),
            map.k()
        )));
    }
    let task = ds.label(&a.label, log)?;
    if task.k() != clf.n_classes() {
        return Err(Failure::data(format!(
            "label {:?} has {} values, the classifier predicts {}",
            task.name(),
            task.k(),
            clf.n_classes()
        )));
    }
    let (ids, z) = map.known_rows(&ds.concept, &ds.eval_ids())?;
    if ids.is_empty() {
        return Err(Failure::data(
            "no evaluation rows with a known concept value",
        ));
    }
    let y = task.aligned(&ids)?;
    let probs = clf.predict_proba_batch(&rows_of(&ds.embeddings, &ids, "row")?)?;
    let pred: Vec<usize> = (0..ids.len())
        .map(|i| predictions(&probs.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    let c = task.k();
    let gaps = tpr_gap(&pred, &y, &z, c)?;
    let mut per_class = vec![0usize; c];
    let mut per_class_z0 = vec![0usize; c];
    for (&yi, &zi) in y.iter().zip(&z) {
        per_class[yi] += 1;
        if zi == 0 {
            per_class_z0[yi] += 1;
        }
    }
    let weights: Vec<f64> = per_class.iter().map(|&n| n as f64).collect();
    let fractions: Vec<f64> = (0..c)
        .map(|k| {
            if per_class[k] > 0 {
                per_class_z0[k] as f64 / per_class[k] as f64
            } else {
                0.0
            }
        })
        .collect();
    let z0 = &ds.concept.values()[map.known[0]];
    let mut out = String::new();
    for (k, class) in task.values().iter().enumerate() {
        opt_line(
            &mut out,
            "tpr_gap",
            &format!("y={class},z={z0}"),
            gaps.gap(0, k),
        );
    }
    opt_line(
        &mut out,
        "tpr_gap_weighted",
        "",
        tpr_gap_weighted(&gaps, &weights).ok(),
    );
    let corr = tpr_gap_correlation(&gaps, &fractions)?;
    opt_line(&mut out, "tpr_gap_corr", "", corr.map(|c| c.0));
    opt_line(&mut out, "tpr_gap_slope", "", corr.map(|c| c.1));
    Ok(out)
}
