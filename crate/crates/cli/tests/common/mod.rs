//! Helpers shared by the CLI test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cfrep_core::store::read_embeddings;

pub fn cfrep() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cfrep"))
}

pub fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    cfrep().args(args).output().expect("failed to spawn cfrep")
}

/// Runs and panics with stderr on failure.
pub fn run_ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "cfrep {:?} failed: {}",
        args.iter()
            .map(|a| a.as_ref().to_string_lossy().into_owned())
            .collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// File name to contents, for every file directly inside `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            out.insert(
                entry.file_name().to_string_lossy().into_owned(),
                fs::read(entry.path()).unwrap(),
            );
        }
    }
    out
}

/// Writes the first `n` rows of an embedding container as GloVe text.
pub fn write_glove(container: &Path, n: usize, path: &Path) {
    let set = read_embeddings(container).unwrap();
    let mut text = String::new();
    for i in 0..n.min(set.len()) {
        text.push_str(&set.ids()[i]);
        for v in set.row(i) {
            let _ = write!(text, " {v}");
        }
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

pub fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Outcome of running one command twice.
pub struct Repeat {
    pub name: String,
    pub identical: bool,
    pub detail: String,
}

/// Runs every subcommand twice into sibling directories and compares the
/// outputs byte for byte. Later steps read the first run's outputs.
pub fn determinism_suite(root: &Path) -> Vec<Repeat> {
    let mut results = Vec::new();
    let mut step = |name: &str, args: Vec<String>| -> PathBuf {
        let a = root.join(name).join("a");
        let b = root.join(name).join("b");
        for dir in [a.clone(), b.clone()] {
            let mut full = args.clone();
            full.extend(["--out".to_string(), s(&dir)]);
            let out = run(&full);
            if !out.status.success() {
                results.push(Repeat {
                    name: name.into(),
                    identical: false,
                    detail: format!("failed: {}", String::from_utf8_lossy(&out.stderr).trim()),
                });
                return a;
            }
        }
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        let differing: Vec<&String> = sa
            .keys()
            .chain(sb.keys())
            .filter(|k| sa.get(*k) != sb.get(*k))
            .collect();
        results.push(Repeat {
            name: name.into(),
            identical: differing.is_empty() && !sa.is_empty(),
            detail: if differing.is_empty() {
                format!("{} files", sa.len())
            } else {
                format!("differs: {differing:?}")
            },
        });
        a
    };
    let v = |items: &[&str]| items.iter().map(|x| x.to_string()).collect::<Vec<_>>();

    let tern = step(
        "gen-scm",
        v(&[
            "gen-scm",
            "--seed",
            "5",
            "--n-train",
            "2000",
            "--n-test",
            "200",
        ]),
    );
    let bin = step(
        "gen-scm-k2",
        v(&[
            "gen-scm",
            "--seed",
            "6",
            "--k",
            "2",
            "--r",
            "1",
            "--n-train",
            "2000",
            "--n-test",
            "200",
        ]),
    );
    let tm = s(&tern.join("manifest.txt"));
    let bm = s(&bin.join("manifest.txt"));

    let erased = step("erase", v(&["erase", "--manifest", &tm]));
    let proj = s(&erased.join("projector.bin"));
    let fit = step(
        "fit-cfr",
        v(&[
            "fit-cfr",
            "--manifest",
            &tm,
            "--projector",
            &proj,
            "--lambda",
            "0.01",
        ]),
    );
    let model = s(&fit.join("model.bin"));
    step(
        "fit-cfr-sgd",
        v(&[
            "fit-cfr",
            "--manifest",
            &tm,
            "--method",
            "sgd",
            "--epochs",
            "3",
            "--lr",
            "0.01",
            "--seed",
            "4",
        ]),
    );
    let applied = step(
        "apply-cfr",
        v(&[
            "apply-cfr",
            "--manifest",
            &tm,
            "--projector",
            &proj,
            "--model",
            &model,
        ]),
    );
    step(
        "apply-cfr-stochastic",
        v(&[
            "apply-cfr",
            "--manifest",
            &tm,
            "--projector",
            &proj,
            "--model",
            &model,
            "--mode",
            "stochastic",
            "--seed",
            "9",
        ]),
    );
    let cfr = s(&applied.join("cfr.bin"));
    let clf_dir = step(
        "train-clf",
        v(&["train-clf", "--manifest", &tm, "--label", "y"]),
    );
    let clf = s(&clf_dir.join("clf.bin"));
    for metric in ["pip", "atv", "ate", "error", "nested", "pi"] {
        let mut args = v(&[
            "eval",
            "--manifest",
            &tm,
            "--metric",
            metric,
            "--clf",
            &clf,
            "--cfr",
            &cfr,
        ]);
        if metric == "error" {
            args.push("--random-explainer".into());
        }
        step(&format!("eval-{metric}"), args);
    }
    step(
        "eval-ate-score",
        v(&[
            "eval",
            "--manifest",
            &tm,
            "--metric",
            "ate-score",
            "--clf",
            &clf,
            "--cfr",
            &cfr,
            "--scores",
            "0,1",
        ]),
    );

    let bfit = step("fit-cfr-k2", v(&["fit-cfr", "--manifest", &bm]));
    let (bproj, bmodel) = (s(&bfit.join("projector.bin")), s(&bfit.join("model.bin")));
    let by = step(
        "train-clf-k2-y",
        v(&["train-clf", "--manifest", &bm, "--label", "y"]),
    );
    let bz = step("train-clf-k2-z", v(&["train-clf", "--manifest", &bm]));
    let (by, bz) = (s(&by.join("clf.bin")), s(&bz.join("clf.bin")));
    step(
        "eval-tpr-gap",
        v(&[
            "eval",
            "--manifest",
            &bm,
            "--metric",
            "tpr-gap",
            "--clf",
            &by,
        ]),
    );
    step(
        "augment",
        v(&[
            "augment",
            "--manifest",
            &bm,
            "--projector",
            &bproj,
            "--model",
            &bmodel,
            "--seed",
            "2",
        ]),
    );
    step(
        "baseline-approx",
        v(&[
            "baseline-approx",
            "--manifest",
            &bm,
            "--clf",
            &format!("{bz},{by}"),
            "--seed",
            "3",
        ]),
    );
    step(
        "gen-eeec",
        v(&[
            "gen-eeec",
            "--n",
            "2000",
            "--version",
            "aggressive-gender",
            "--seed",
            "1",
        ]),
    );
    let glove = root.join("vocab.txt");
    write_glove(&bin.join("embeddings.bin"), 500, &glove);
    let converted = step(
        "convert-glove",
        v(&["convert-glove", "--input", &s(&glove)]),
    );
    let words = "tr000000,tr000001,tr000002";
    step(
        "explicit-cf",
        v(&[
            "explicit-cf",
            "--vocab",
            &s(&glove),
            "--projector",
            &bproj,
            "--model",
            &bmodel,
            "--words",
            words,
            "--target",
            "1",
        ]),
    );
    step(
        "explicit-cf-container",
        v(&[
            "explicit-cf",
            "--vocab",
            &s(&converted.join("vocab.bin")),
            "--projector",
            &bproj,
            "--model",
            &bmodel,
            "--words",
            words,
            "--target",
            "0",
            "--rule",
            "radius",
        ]),
    );
    results
}
