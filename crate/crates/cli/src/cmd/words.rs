use std::fmt::Write as _;
use std::io::Read as _;
use std::path::Path;

use cfrep_core::baselines::{approximate_counterfactual, build_aspect_index};
use cfrep_core::cfr::CfrModel;
use cfrep_core::classify::{LinearClassifier, ProbabilisticClassifier};
use cfrep_core::erasure::ErasureProjector;
use cfrep_core::explicit_cf::{nearest_explicit_cf, read_glove, ExplicitCf, Vocabulary};
use cfrep_core::store::{read_embeddings, read_labels, EmbeddingSet, MAGIC};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::summary;
use crate::config::RunConfig;
use crate::dataset::{check_exists, Dataset};
use crate::error::{CmdResult, Failure, Kind, Tag};
use crate::runlog::{write_report, write_text, RunLog};
use crate::{BaselineApproxArgs, ExplicitCfArgs};

/// Reads an embedding container or, failing the magic check, GloVe text.
fn read_vocab_file(path: &Path) -> CmdResult<EmbeddingSet> {
    let mut head = [0u8; 4];
    let mut f =
        std::fs::File::open(path).tag(Kind::Data, &format!("cannot open {}", path.display()))?;
    let n = f
        .read(&mut head)
        .tag(Kind::Data, &format!("cannot read {}", path.display()))?;
    if n == 4 && &head == MAGIC {
        Ok(read_embeddings(path)?)
    } else {
        Ok(read_glove(path)?)
    }
}

pub fn explicit_cf(mut cfg: RunConfig, a: &ExplicitCfArgs) -> CmdResult<()> {
    let mut log = RunLog::new("explicit-cf");
    cfg.set("target", a.target);
    cfg.set("rule", a.rule);
    cfg.set("words", a.words.join(","));
    for (p, what) in [
        (&a.vocab, "vocabulary"),
        (&a.projector, "projector"),
        (&a.model, "model"),
    ] {
        check_exists(p, what)?;
        log.input(p);
    }
    let mut vocab = Vocabulary::from_embeddings(&read_vocab_file(&a.vocab)?)?;
    if let Some(p) = &a.labels {
        check_exists(p, "labels")?;
        log.input(p);
        vocab = vocab.with_labels(read_labels(p)?);
    }
    let proj = ErasureProjector::load(&a.projector)?;
    let model = CfrModel::load(&a.model)?;
    if a.target >= model.k() {
        return Err(Failure::config(format!(
            "target {} out of range for k={}",
            a.target,
            model.k()
        )));
    }
    let mut table = String::from("word\ttarget\texplicit\tdistance\n");
    let mut found = 0;
    for w in &a.words {
        match nearest_explicit_cf(&vocab, &model, &proj, w, a.target, a.rule)? {
            ExplicitCf::Found { word, distance } => {
                found += 1;
                let _ = writeln!(table, "{w}\t{}\t{word}\t{distance}", a.target);
            }
            ExplicitCf::NotFound => {
                let _ = writeln!(table, "{w}\t{}\t-\t-", a.target);
            }
        }
    }
    write_text(&cfg.out.join("explicit.tsv"), &table)?;
    log.output("explicit.tsv");
    print!("{table}");
    let lines = [
        ("queries", a.words.len().to_string()),
        ("found", found.to_string()),
        ("vocabulary", vocab.len().to_string()),
    ];
    write_text(&cfg.out.join("report.txt"), &summary(&lines))?;
    log.output("report.txt");
    log.write(&cfg)
}

pub fn baseline_approx(mut cfg: RunConfig, a: &BaselineApproxArgs) -> CmdResult<()> {
    let mut log = RunLog::new("baseline-approx");
    cfg.set(
        "clf",
        a.clf
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    let ds = Dataset::load(&cfg, &mut log)?;
    let mut classifiers = Vec::with_capacity(a.clf.len());
    for p in &a.clf {
        check_exists(p, "classifier")?;
        log.input(p);
        classifiers.push(LinearClassifier::load(p)?);
    }
    if classifiers[0].n_classes() != ds.concept.k() {
        return Err(Failure::data(format!(
            "the first classifier predicts {} classes, concept {:?} has {}",
            classifiers[0].n_classes(),
            ds.concept.name(),
            ds.concept.k()
        )));
    }
    let pairs = ds.pairs(&mut log)?;
    pairs.validate(&ds.concept, None)?;
    let refs: Vec<&dyn ProbabilisticClassifier> = classifiers
        .iter()
        .map(|c| c as &dyn ProbabilisticClassifier)
        .collect();
    let index = build_aspect_index(ds.embeddings.ids(), &ds.embeddings.to_matrix(), &refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = String::new();
    let mut found = 0;
    for p in &pairs.pairs {
        let mut wanted = index
            .labels_of(&p.source_id)
            .ok_or_else(|| {
                Failure::data(format!("pair source {:?} has no embedding", p.source_id))
            })?
            .to_vec();
        wanted[0] = p.target;
        let hit = approximate_counterfactual(&index, &wanted, &p.source_id, &mut rng);
        if hit.is_some() {
            found += 1;
        }
        let _ = writeln!(
            out,
            "{} {} {}",
            p.source_id,
            p.target,
            hit.as_deref().unwrap_or("none")
        );
    }
    write_text(&cfg.out.join("approx.txt"), &out)?;
    log.output("approx.txt");
    let lines = [
        ("pairs", pairs.len().to_string()),
        ("found", found.to_string()),
        ("none", (pairs.len() - found).to_string()),
        ("buckets", index.n_buckets().to_string()),
    ];
    write_report(&cfg, &mut log, &summary(&lines))?;
    log.write(&cfg)
}
