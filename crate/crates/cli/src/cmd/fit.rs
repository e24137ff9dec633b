use std::collections::BTreeMap;

use cfrep_core::cfr::{
    counterfactual, counterfactual_unknown, fit_cfr_matrix, fit_cfr_sgd_matrix, CfrModel,
    FitMethod, SgdConfig,
};
use cfrep_core::classify::{
    fit_logreg_ova, LinearClassifier, LogRegConfig, ProbabilisticClassifier,
};
use cfrep_core::erasure::{cross_covariance_matrix, fit_projector_matrix, ErasureProjector};
use cfrep_core::store::{
    read_embeddings, write_embeddings, write_labels, DatasetManifest, EmbeddingSet, LabelVector,
};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cfr_id, summary};
use crate::config::RunConfig;
use crate::dataset::{check_exists, ConceptMap, Dataset};
use crate::error::{CmdResult, Failure};
use crate::runlog::{write_report, RunLog};
use crate::{ApplyCfrArgs, AugmentArgs, FitCfrArgs, TrainClfArgs};

/// Known-value training rows: ids, model indices and the N×d matrix.
fn training_rows(
    ds: &Dataset,
    map: &ConceptMap,
) -> CmdResult<(Vec<String>, Vec<usize>, DMatrix<f64>)> {
    let (ids, z) = map.known_rows(&ds.concept, &ds.fit_ids())?;
    if ids.is_empty() {
        return Err(Failure::data("no training rows with a known concept value"));
    }
    let x = ds.embeddings.select(&ids)?.to_matrix();
    Ok((ids, z, x))
}

fn load_projector(
    path: &std::path::Path,
    map: &ConceptMap,
    log: &mut RunLog,
) -> CmdResult<ErasureProjector> {
    check_exists(path, "projector")?;
    log.input(path);
    let proj = ErasureProjector::load(path)?;
    if proj.k() != map.k() {
        return Err(Failure::data(format!(
            "projector was fitted for {} concept values, the dataset has {}",
            proj.k(),
            map.k()
        )));
    }
    Ok(proj)
}

fn load_model(
    path: &std::path::Path,
    proj: &ErasureProjector,
    log: &mut RunLog,
) -> CmdResult<CfrModel> {
    check_exists(path, "model")?;
    log.input(path);
    let model = CfrModel::load(path)?;
    if model.k() != proj.k() || model.dim() != proj.dim() || model.rank() != proj.rank() {
        return Err(Failure::data(format!(
            "model (k={}, d={}, r={}) does not match projector (k={}, d={}, r={})",
            model.k(),
            model.dim(),
            model.rank(),
            proj.k(),
            proj.dim(),
            proj.rank()
        )));
    }
    Ok(model)
}

pub fn erase(cfg: RunConfig) -> CmdResult<()> {
    let mut log = RunLog::new("erase");
    let ds = Dataset::load(&cfg, &mut log)?;
    let map = ConceptMap::new(&ds.concept, cfg.setting)?;
    let (_, z, x) = training_rows(&ds, &map)?;
    let proj = fit_projector_matrix(&x, &z, map.k(), cfg.rank_tolerance)?;
    proj.save(cfg.out.join("projector.bin"))?;
    log.output("projector.bin");
    write_embeddings(&proj.erase(&ds.embeddings)?, cfg.out.join("erased.bin"))?;
    log.output("erased.bin");
    let before = cross_covariance_matrix(&x, &z, map.k())?.norm();
    let after = cross_covariance_matrix(&proj.erase_matrix(&x)?, &z, map.k())?.norm();
    let lines = [
        ("rank", proj.rank().to_string()),
        ("k", map.k().to_string()),
        ("fit_rows", x.nrows().to_string()),
        ("cross_cov_norm_before", before.to_string()),
        ("cross_cov_norm_after", after.to_string()),
    ];
    write_report(&cfg, &mut log, &summary(&lines))?;
    log.write(&cfg)
}

pub fn fit_cfr(mut cfg: RunConfig, a: &FitCfrArgs) -> CmdResult<()> {
    let mut log = RunLog::new("fit-cfr");
    if let Some(m) = a.method {
        cfg.cfr_method = m;
    }
    if let Some(l) = a.lambda {
        cfg.cfr_lambda = l;
    }
    if let Some(l) = a.lr {
        cfg.cfr_lr = l;
    }
    if let Some(e) = a.epochs {
        cfg.cfr_epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.cfr_batch_size = b;
    }
    let ds = Dataset::load(&cfg, &mut log)?;
    let map = ConceptMap::new(&ds.concept, cfg.setting)?;
    let (_, z, x) = training_rows(&ds, &map)?;
    let proj = match &a.projector {
        Some(p) => load_projector(p, &map, &mut log)?,
        None => {
            let proj = fit_projector_matrix(&x, &z, map.k(), cfg.rank_tolerance)?;
            proj.save(cfg.out.join("projector.bin"))?;
            log.output("projector.bin");
            proj
        }
    };
    let model = match cfg.cfr_method {
        FitMethod::ClosedForm => fit_cfr_matrix(&x, &z, &proj, cfg.cfr_lambda)?,
        FitMethod::Sgd => {
            let sgd = SgdConfig {
                lr: cfg.cfr_lr,
                epochs: cfg.cfr_epochs,
                batch_size: cfg.cfr_batch_size,
                seed: cfg.seed,
            };
            fit_cfr_sgd_matrix(&x, &z, &proj, cfg.cfr_lambda, &sgd)?
        }
    };
    model.save(cfg.out.join("model.bin"))?;
    log.output("model.bin");

    // in-sample mean squared error of the predicted concept coordinates
    let mut sse = vec![0.0; map.k()];
    for (i, &zi) in z.iter().enumerate() {
        let dec = proj.decompose(&x.row(i).transpose())?;
        sse[zi] += (model.class(zi).predict(&dec.perp) - dec.par_coords).norm_squared();
    }
    let counts = model.counts();
    let mut lines: Vec<(String, String)> = vec![
        ("method".into(), cfg.cfr_method.as_str().into()),
        ("lambda".into(), cfg.cfr_lambda.to_string()),
        ("rank".into(), proj.rank().to_string()),
    ];
    for (m, &v) in map.known.iter().enumerate() {
        let name = &ds.concept.values()[v];
        lines.push((format!("count_{name}"), counts[m].to_string()));
        let mse = if counts[m] > 0 {
            sse[m] / counts[m] as f64
        } else {
            0.0
        };
        lines.push((format!("fit_mse_{name}"), mse.to_string()));
    }
    let borrowed: Vec<(&str, String)> =
        lines.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    write_report(&cfg, &mut log, &summary(&borrowed))?;
    log.write(&cfg)
}

/// Counterfactual of one row for a label-space target value.
fn counterfactual_for(
    model: &CfrModel,
    proj: &ErasureProjector,
    map: &ConceptMap,
    x: &DVector<f64>,
    target: usize,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> CmdResult<DVector<f64>> {
    if Some(target) == map.unknown {
        return Ok(counterfactual_unknown(proj, x)?);
    }
    let m = map
        .model_index(target)
        .ok_or_else(|| Failure::data(format!("target value {target} is out of range")))?;
    Ok(counterfactual(model, proj, x, m, cfg.mode, rng)?)
}

pub fn apply_cfr(cfg: RunConfig, a: &ApplyCfrArgs) -> CmdResult<()> {
    let mut log = RunLog::new("apply-cfr");
    let ds = Dataset::load(&cfg, &mut log)?;
    let map = ConceptMap::new(&ds.concept, cfg.setting)?;
    let proj = load_projector(&a.projector, &map, &mut log)?;
    let model = load_model(&a.model, &proj, &mut log)?;
    let pairs = ds.pairs(&mut log)?;
    pairs.validate(&ds.concept, None)?;
    let index = ds.embeddings.id_index();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids = Vec::with_capacity(pairs.len());
    let mut rows = DMatrix::zeros(pairs.len(), ds.embeddings.dim());
    for (i, p) in pairs.pairs.iter().enumerate() {
        let &row = index.get(p.source_id.as_str()).ok_or_else(|| {
            Failure::data(format!("pair source {:?} has no embedding", p.source_id))
        })?;
        let x = ds.embeddings.row_vector(row);
        let cf = counterfactual_for(&model, &proj, &map, &x, p.target, &cfg, &mut rng)?;
        rows.row_mut(i).copy_from(&cf.transpose());
        ids.push(cfr_id(&p.source_id, p.target));
    }
    let set = EmbeddingSet::from_matrix(ids, &rows)?;
    write_embeddings(&set, cfg.out.join("cfr.bin"))?;
    log.output("cfr.bin");
    let lines = [
        ("pairs", pairs.len().to_string()),
        ("mode", format!("{:?}", cfg.mode).to_lowercase()),
    ];
    write_report(&cfg, &mut log, &summary(&lines))?;
    log.write(&cfg)
}

fn accuracy(clf: &LinearClassifier, x: &DMatrix<f64>, y: &[usize]) -> CmdResult<f64> {
    let p = clf.predict_proba_batch(x)?;
    let hits = (0..x.nrows())
        .filter(|&i| {
            let row: Vec<f64> = p.row(i).iter().copied().collect();
            cfrep_core::classify::argmax(&row) == y[i]
        })
        .count();
    Ok(hits as f64 / x.nrows().max(1) as f64)
}

pub fn train_clf(mut cfg: RunConfig, a: &TrainClfArgs) -> CmdResult<()> {
    let mut log = RunLog::new("train-clf");
    let ds = Dataset::load(&cfg, &mut log)?;
    let label_name = a.label.clone().unwrap_or_else(|| cfg.concept.clone());
    let labels = ds.label(&label_name, &mut log)?;
    let lambda = a.lambda.unwrap_or_else(|| cfg.clf_lambda_for(&label_name));
    cfg.set("label", &label_name);
    cfg.set("lambda", lambda);
    let features = match &a.embeddings {
        Some(p) => {
            check_exists(p, "embeddings")?;
            log.input(p);
            cfg.set("embeddings", p.display());
            read_embeddings(p)?
        }
        None => ds.embeddings.clone(),
    };
    let train_ids = ds.fit_ids();
    let x = features.select(&train_ids)?.to_matrix();
    let y = labels.aligned(&train_ids)?;
    let lr_cfg = LogRegConfig {
        max_iter: cfg.clf_max_iter,
        grad_tol: cfg.clf_grad_tol,
    };
    let clf = fit_logreg_ova(&x, &y, labels.values().to_vec(), lambda, &lr_cfg)?;
    clf.save(cfg.out.join("clf.bin"))?;
    log.output("clf.bin");
    let mut lines = vec![("train_accuracy", accuracy(&clf, &x, &y)?.to_string())];
    let test_ids = ds.eval_ids();
    if ds.splits.is_some() && !test_ids.is_empty() {
        let xt = features.select(&test_ids)?.to_matrix();
        let yt = labels.aligned(&test_ids)?;
        let mut counts = vec![0usize; labels.k()];
        for &v in &yt {
            counts[v] += 1;
        }
        let majority = *counts.iter().max().unwrap_or(&0) as f64 / yt.len() as f64;
        lines.push(("test_accuracy", accuracy(&clf, &xt, &yt)?.to_string()));
        lines.push(("test_majority", majority.to_string()));
    }
    write_report(&cfg, &mut log, &summary(&lines))?;
    log.write(&cfg)
}

pub fn augment(mut cfg: RunConfig, a: &AugmentArgs) -> CmdResult<()> {
    let mut log = RunLog::new("augment");
    cfg.set("label", &a.label);
    let ds = Dataset::load(&cfg, &mut log)?;
    let map = ConceptMap::new(&ds.concept, cfg.setting)?;
    if map.k() != 2 {
        return Err(Failure::config(format!(
            "augmentation needs a concept with two known values, {:?} has {}",
            ds.concept.name(),
            map.k()
        )));
    }
    let proj = load_projector(&a.projector, &map, &mut log)?;
    let model = load_model(&a.model, &proj, &mut log)?;
    let task = ds.label(&a.label, &mut log)?;
    let (ids, z, x) = training_rows(&ds, &map)?;
    let y = task.aligned(&ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = ids.len();
    let d = x.ncols();
    let mut all = DMatrix::zeros(2 * n, d);
    all.rows_mut(0, n).copy_from(&x);
    let mut out_ids = ids.clone();
    let mut concept = z.iter().map(|&m| map.known[m]).collect::<Vec<_>>();
    for i in 0..n {
        let target = map.known[1 - z[i]];
        let cf = counterfactual_for(
            &model,
            &proj,
            &map,
            &x.row(i).transpose(),
            target,
            &cfg,
            &mut rng,
        )?;
        all.row_mut(n + i).copy_from(&cf.transpose());
        out_ids.push(format!("{}.aug", ids[i]));
        concept.push(target);
    }
    let mut y_all = y.clone();
    y_all.extend_from_slice(&y);
    let source: Vec<usize> = (0..2 * n).map(|i| usize::from(i >= n)).collect();
    let out = &cfg.out;
    write_embeddings(
        &EmbeddingSet::from_matrix(out_ids.clone(), &all)?,
        out.join("augmented.bin"),
    )?;
    let task_out = LabelVector::new(task.name(), task.values().to_vec(), out_ids.clone(), y_all)?;
    let concept_out = LabelVector::new(
        ds.concept.name(),
        ds.concept.values().to_vec(),
        out_ids.clone(),
        concept,
    )?;
    let source_out = LabelVector::new(
        "source",
        vec!["original".into(), "counterfactual".into()],
        out_ids,
        source,
    )?;
    let task_file = format!("{}.labels", task.name());
    let concept_file = format!("{}.labels", ds.concept.name());
    write_labels(&task_out, out.join(&task_file))?;
    if concept_file != task_file {
        write_labels(&concept_out, out.join(&concept_file))?;
    }
    write_labels(&source_out, out.join("source.labels"))?;
    let mut labels = BTreeMap::from([
        (task.name().to_string(), out.join(&task_file)),
        ("source".to_string(), out.join("source.labels")),
    ]);
    labels.insert(ds.concept.name().to_string(), out.join(&concept_file));
    let manifest = DatasetManifest {
        dataset: ds.manifest.dataset.clone(),
        embeddings: out.join("augmented.bin"),
        labels,
        pairs: None,
        references: None,
        splits: None,
    };
    manifest.save(out.join("manifest.txt"))?;
    for name in [
        "augmented.bin",
        &task_file,
        &concept_file,
        "source.labels",
        "manifest.txt",
    ] {
        log.output(name);
    }
    let lines = [
        ("original_rows", n.to_string()),
        ("augmented_rows", (2 * n).to_string()),
    ];
    write_report(&cfg, &mut log, &summary(&lines))?;
    log.write(&cfg)
}
