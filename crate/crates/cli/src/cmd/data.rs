use std::collections::BTreeMap;

use cfrep_core::eeec::{self, Attribute, Gender, GenerateConfig, Mood, TemplateBank};
use cfrep_core::explicit_cf::{read_glove, Vocabulary};
use cfrep_core::store::{
    write_embeddings, write_labels, write_matrix, write_pairs, write_splits, DatasetManifest,
    EmbeddingSet, EvalPair, EvalPairSet, LabelVector, MatrixFile, Split,
};
use cfrep_core::synthetic::{ScmFixture, ScmFixtureConfig};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cfr_id, stack, summary};
use crate::config::RunConfig;
use crate::error::{CmdResult, Failure};
use crate::runlog::{write_report, RunLog};
use crate::GenScmArgs;

pub fn gen_scm(mut cfg: RunConfig, a: &GenScmArgs) -> CmdResult<()> {
    let mut log = RunLog::new("gen-scm");
    for (k, v) in [
        ("n_train", a.n_train.to_string()),
        ("n_test", a.n_test.to_string()),
        ("p", a.p.to_string()),
        ("r", a.r.to_string()),
        ("k", a.k.to_string()),
        ("gamma", a.gamma.to_string()),
        ("label_noise", a.label_noise.to_string()),
        ("perp_condition", a.perp_condition.to_string()),
    ] {
        cfg.set(k, v);
    }
    if cfg.concept == "y" {
        return Err(Failure::config(
            "the concept label cannot be named \"y\" (the task label)",
        ));
    }
    if a.n_train == 0 || a.n_test == 0 {
        return Err(Failure::config("--n-train and --n-test must be positive"));
    }
    let fx = ScmFixture::new(&ScmFixtureConfig {
        p: a.p,
        r: a.r,
        k: a.k,
        seed: cfg.seed,
        perp_condition: a.perp_condition,
        ..Default::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let train = fx.sample(a.n_train, &mut rng)?;
    let test = fx.sample(a.n_test, &mut rng)?;
    let y_train = fx.labels(&train, a.gamma, a.label_noise, cfg.seed, &mut rng);
    let y_test = fx.labels(&test, a.gamma, a.label_noise, cfg.seed, &mut rng);

    let train_ids: Vec<String> = (0..train.len()).map(|i| format!("tr{i:06}")).collect();
    let test_ids: Vec<String> = (0..test.len()).map(|i| format!("te{i:06}")).collect();
    let ids: Vec<String> = train_ids.iter().chain(&test_ids).cloned().collect();
    let out = &cfg.out;

    let embeddings = EmbeddingSet::from_matrix(ids.clone(), &stack(&train.x, &test.x))?;
    write_embeddings(&embeddings, out.join("embeddings.bin"))?;
    let z: Vec<usize> = train.z().iter().chain(test.z()).copied().collect();
    let concept = LabelVector::new(
        cfg.concept.clone(),
        (0..a.k).map(|v| format!("z{v}")).collect(),
        ids.clone(),
        z,
    )?;
    let concept_file = format!("{}.labels", cfg.concept);
    write_labels(&concept, out.join(&concept_file))?;
    let y: Vec<usize> = y_train.iter().chain(&y_test).copied().collect();
    let y_rate = y.iter().sum::<usize>() as f64 / y.len() as f64;
    let task = LabelVector::new("y", vec!["y0".into(), "y1".into()], ids.clone(), y)?;
    write_labels(&task, out.join("y.labels"))?;
    let splits: Vec<(String, Split)> = train_ids
        .iter()
        .map(|id| (id.clone(), Split::Train))
        .chain(test_ids.iter().map(|id| (id.clone(), Split::Test)))
        .collect();
    write_splits(&splits, out.join("splits.txt"))?;

    // every test row gets the next concept value as its target
    let d = fx.dim();
    let mut pairs = Vec::with_capacity(test.len());
    let mut ref_ids = Vec::with_capacity(test.len());
    let mut refs = DMatrix::zeros(test.len(), d);
    let mut truth = DMatrix::zeros(test.len(), d);
    for (i, id) in test_ids.iter().enumerate() {
        let t = (test.z()[i] + 1) % a.k;
        let rid = cfr_id(id, t);
        refs.row_mut(i)
            .copy_from(&fx.reference_counterfactual(&test, i, t)?.transpose());
        truth
            .row_mut(i)
            .copy_from(&fx.true_counterfactual(&test, i, t)?.transpose());
        pairs.push(EvalPair {
            source_id: id.clone(),
            target: t,
            reference_id: Some(rid.clone()),
            identity: false,
        });
        ref_ids.push(rid);
    }
    write_pairs(&EvalPairSet::new(pairs), out.join("pairs.txt"))?;
    write_embeddings(
        &EmbeddingSet::from_matrix(ref_ids.clone(), &refs)?,
        out.join("references.bin"),
    )?;
    write_matrix(
        &MatrixFile::from_matrix(ref_ids, &truth)?,
        out.join("truth.bin"),
    )?;

    let manifest = DatasetManifest {
        dataset: Some("scm".into()),
        embeddings: out.join("embeddings.bin"),
        labels: BTreeMap::from([
            (cfg.concept.clone(), out.join(&concept_file)),
            ("y".into(), out.join("y.labels")),
        ]),
        pairs: Some(out.join("pairs.txt")),
        references: Some(out.join("references.bin")),
        splits: Some(out.join("splits.txt")),
    };
    manifest.save(out.join("manifest.txt"))?;
    for name in [
        "embeddings.bin",
        &concept_file,
        "y.labels",
        "splits.txt",
        "pairs.txt",
        "references.bin",
        "truth.bin",
        "manifest.txt",
    ] {
        log.output(name);
    }
    let counts = concept.counts();
    let mut lines = vec![
        ("n_train", a.n_train.to_string()),
        ("n_test", a.n_test.to_string()),
        ("dim", d.to_string()),
        ("y_rate", y_rate.to_string()),
    ];
    let count_keys: Vec<String> = (0..a.k).map(|v| format!("count_z{v}")).collect();
    for (key, c) in count_keys.iter().zip(counts) {
        lines.push((key, c.to_string()));
    }
    write_report(&cfg, &mut log, &summary(&lines))?;
    log.write(&cfg)
}

pub fn gen_eeec(mut cfg: RunConfig, a: &crate::GenEeecArgs) -> CmdResult<()> {
    let mut log = RunLog::new("gen-eeec");
    cfg.set("version", a.version);
    cfg.set("n", a.n);
    cfg.set("allocation", a.allocation);
    cfg.set("name_choice", a.name_choice);
    cfg.set("counterfactuals", !a.no_counterfactuals);
    let bank = match &a.bank {
        Some(p) => {
            log.input(p);
            cfg.set("bank", p.display());
            TemplateBank::load(p)?
        }
        None => TemplateBank::shipped(),
    };
    let gen = GenerateConfig {
        version: a.version,
        n: a.n,
        seed: cfg.seed,
        allocation: a.allocation,
        name_choice: a.name_choice,
        counterfactuals: !a.no_counterfactuals,
    };
    let data = eeec::generate(&bank, &gen)?;
    eeec::write_records(&cfg.out.join("records.tsv"), &data.records)?;
    log.output("records.tsv");
    if !a.no_counterfactuals {
        eeec::write_records(&cfg.out.join("counterfactuals.tsv"), &data.counterfactuals)?;
        log.output("counterfactuals.tsv");
    }
    let minimal = data.check_all_minimal(&bank)?;

    let n = data.records.len();
    let mut lines: Vec<(String, String)> = vec![("records".into(), n.to_string())];
    for s in Split::ALL {
        let c = data.records.iter().filter(|r| r.split == s).count();
        lines.push((format!("split_{s}"), c.to_string()));
    }
    for m in Mood::ALL {
        let in_mood: Vec<_> = data.records.iter().filter(|r| r.mood == *m).collect();
        let female = in_mood
            .iter()
            .filter(|r| r.gender == Gender::Female)
            .count();
        lines.push((
            format!("female_share_{m}"),
            (female as f64 / in_mood.len().max(1) as f64).to_string(),
        ));
    }
    for attr in Attribute::ALL {
        let with_cf = data
            .records
            .iter()
            .filter(|r| r.cf_id(*attr).is_some())
            .count();
        lines.push((format!("counterfactuals_{attr}"), with_cf.to_string()));
    }
    lines.push(("minimal_pairs".into(), minimal.to_string()));
    let borrowed: Vec<(&str, String)> =
        lines.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    write_report(&cfg, &mut log, &summary(&borrowed))?;
    log.write(&cfg)
}

pub fn convert_glove(cfg: RunConfig, a: &crate::ConvertGloveArgs) -> CmdResult<()> {
    let mut log = RunLog::new("convert-glove");
    log.input(&a.input);
    let raw = read_glove(&a.input)?;
    let vocab = Vocabulary::from_embeddings(&raw)?;
    write_embeddings(vocab.vectors(), cfg.out.join("vocab.bin"))?;
    log.output("vocab.bin");
    let lines = [
        ("words", vocab.len().to_string()),
        ("dim", vocab.dim().to_string()),
    ];
    write_report(&cfg, &mut log, &summary(&lines))?;
    log.write(&cfg)
}
