mod common;

use std::fs;
use std::path::{Path, PathBuf};

use cfrep_core::classify::LinearClassifier;
use cfrep_core::store::{read_embeddings, read_matrix, write_embeddings, EmbeddingSet};
use common::{run, run_ok, s};
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

fn gen_scm(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "gen-scm",
        "--n-train",
        "600",
        "--n-test",
        "60",
        "--seed",
        "3",
    ];
    args.extend_from_slice(extra);
    let out = s(dir);
    args.extend(["--out", &out]);
    run_ok(&args);
    dir.join("manifest.txt")
}

fn code(args: &[&str]) -> (i32, String) {
    let out = run(args);
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn report_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("report.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} ")))
        .unwrap_or_else(|| panic!("no {key} in report:\n{text}"))
        .to_string()
}

#[test]
fn missing_out_is_a_config_error() {
    let (c, _) = code(&["gen-scm"]);
    assert_eq!(c, 2);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.toml");
    fs::write(&cfg, "seed = 1\nbogus = 2\n").unwrap();
    let (c, _) = code(&[
        "gen-scm",
        "--config",
        &s(&cfg),
        "--out",
        &s(&t.path().join("o")),
    ]);
    assert_eq!(c, 2);
}

#[test]
fn bad_flag_value_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    let (c, _) = code(&["gen-scm", "--n-train", "many", "--out", &s(t.path())]);
    assert_eq!(c, 2);
    let (c, _) = code(&["eval", "--metric", "nope", "--out", &s(t.path())]);
    assert_eq!(c, 2);
}

#[test]
fn missing_manifest_is_a_data_error() {
    let t = tempfile::tempdir().unwrap();
    let m = s(&t.path().join("absent.txt"));
    let (c, _) = code(&["erase", "--manifest", &m, "--out", &s(&t.path().join("o"))]);
    assert_eq!(c, 3);
}

#[test]
fn corrupt_embeddings_are_a_data_error() {
    let t = tempfile::tempdir().unwrap();
    let m = gen_scm(&t.path().join("d"), &[]);
    fs::write(t.path().join("d/embeddings.bin"), b"garbage bytes").unwrap();
    let (c, _) = code(&[
        "erase",
        "--manifest",
        &s(&m),
        "--out",
        &s(&t.path().join("o")),
    ]);
    assert_eq!(c, 3);
}

#[test]
fn divergent_sgd_is_a_numeric_error() {
    let t = tempfile::tempdir().unwrap();
    let m = gen_scm(&t.path().join("d"), &[]);
    let (c, err) = code(&[
        "fit-cfr",
        "--manifest",
        &s(&m),
        "--method",
        "sgd",
        "--lr",
        "1000",
        "--lambda",
        "0",
        "--out",
        &s(&t.path().join("o")),
    ]);
    assert_eq!(c, 4, "{err}");
}

/// Shared fixture: data, fitted model, counterfactuals and a label classifier.
struct Fitted {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: String,
    cfr: String,
    clf: String,
}

fn fitted(extra: &[&str]) -> Fitted {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let manifest = s(&gen_scm(&root.join("d"), extra));
    run_ok(&[
        "fit-cfr",
        "--manifest",
        &manifest,
        "--out",
        &s(&root.join("fit")),
    ]);
    let proj = s(&root.join("fit/projector.bin"));
    let model = s(&root.join("fit/model.bin"));
    run_ok(&[
        "apply-cfr",
        "--manifest",
        &manifest,
        "--projector",
        &proj,
        "--model",
        &model,
        "--out",
        &s(&root.join("apply")),
    ]);
    run_ok(&[
        "train-clf",
        "--manifest",
        &manifest,
        "--label",
        "y",
        "--out",
        &s(&root.join("clf")),
    ]);
    Fitted {
        cfr: s(&root.join("apply/cfr.bin")),
        clf: s(&root.join("clf/clf.bin")),
        manifest,
        root,
        _dir: dir,
    }
}

#[test]
fn metrics_without_references_name_the_metric() {
    let f = fitted(&[]);
    let path = f.root.join("d/manifest.txt");
    let text = fs::read_to_string(&path).unwrap();
    let stripped: String = text
        .lines()
        .filter(|l| !l.starts_with("references="))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&path, stripped).unwrap();
    let pairs_path = f.root.join("d/pairs.txt");
    let pairs: String = fs::read_to_string(&pairs_path)
        .unwrap()
        .lines()
        .map(|l| match l.split(' ').collect::<Vec<_>>()[..] {
            [src, t, _] => format!("{src} {t} -\n"),
            _ => format!("{l}\n"),
        })
        .collect();
    fs::write(&pairs_path, pairs).unwrap();
    let out = s(&f.root.join("atv"));
    let (c, err) = code(&[
        "eval",
        "--manifest",
        &f.manifest,
        "--metric",
        "atv",
        "--clf",
        &f.clf,
        "--cfr",
        &f.cfr,
        "--out",
        &out,
    ]);
    assert_eq!(c, 3);
    assert!(err.contains("atv"), "{err}");
    // pi does not need references
    run_ok(&[
        "eval",
        "--manifest",
        &f.manifest,
        "--metric",
        "pi",
        "--clf",
        &f.clf,
        "--cfr",
        &f.cfr,
        "--out",
        &out,
    ]);
}

#[test]
fn tpr_gap_requires_a_binary_concept() {
    let f = fitted(&[]);
    let (c, _) = code(&[
        "eval",
        "--manifest",
        &f.manifest,
        "--metric",
        "tpr-gap",
        "--clf",
        &f.clf,
        "--out",
        &s(&f.root.join("tpr")),
    ]);
    assert_eq!(c, 2);
}

#[test]
fn references_as_counterfactuals_give_full_agreement() {
    let f = fitted(&[]);
    let refs = s(&f.root.join("d/references.bin"));
    let out = f.root.join("pip");
    run_ok(&[
        "eval",
        "--manifest",
        &f.manifest,
        "--metric",
        "pip",
        "--clf",
        &f.clf,
        "--cfr",
        &refs,
        "--out",
        &s(&out),
    ]);
    let value = report_value(&out, "pip");
    assert!(value.starts_with("- 1 "), "{value}");
}

#[test]
fn run_log_records_input_hashes_and_not_the_output_dir() {
    let f = fitted(&[]);
    let log = fs::read_to_string(f.root.join("fit/run.log")).unwrap();
    let emb = f.root.join("d/embeddings.bin");
    let digest = hex::encode(Sha256::digest(fs::read(&emb).unwrap()));
    assert!(
        log.contains(&format!("{} sha256={digest}", emb.display())),
        "{log}"
    );
    assert!(!log.contains(&s(&f.root.join("fit"))), "{log}");
    assert!(log.contains("[outputs]\n"));
    assert!(log.contains("model.bin sha256="));
}

#[test]
fn report_is_mirrored_to_stdout() {
    let t = tempfile::tempdir().unwrap();
    let out = run_ok(&["gen-eeec", "--n", "400", "--out", &s(t.path())]);
    let report = fs::read_to_string(t.path().join("report.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), report);
    assert!(report.contains("records 400"));
}

#[test]
fn empty_aspect_bucket_reports_none() {
    let f = fitted(&["--k", "2", "--r", "1"]);
    // A concept classifier that always answers the first value leaves every
    // bucket for the second value empty.
    let dim = read_embeddings(f.root.join("d/embeddings.bin"))
        .unwrap()
        .dim();
    let constant = LinearClassifier::new(
        DMatrix::zeros(2, dim),
        DVector::from_vec(vec![1.0, 0.0]),
        vec!["z0".into(), "z1".into()],
        0.0,
    )
    .unwrap();
    let cz = f.root.join("constant.bin");
    constant.save(&cz).unwrap();
    let out = f.root.join("approx");
    run_ok(&[
        "baseline-approx",
        "--manifest",
        &f.manifest,
        "--clf",
        &format!("{},{}", s(&cz), f.clf),
        "--out",
        &s(&out),
    ]);
    let lines = fs::read_to_string(out.join("approx.txt")).unwrap();
    for line in lines.lines() {
        let fields: Vec<&str> = line.split(' ').collect();
        if fields[1] == "1" {
            assert_eq!(fields[2], "none", "{line}");
        } else {
            assert_ne!(fields[2], "none", "{line}");
        }
    }
    assert_ne!(report_value(&out, "none"), "0");
    assert_ne!(report_value(&out, "found"), "0");
}

/// Two classes whose third coordinate is an exact affine function of the
/// first two, so the per-class regression is exact.
fn write_noiseless(dir: &Path) -> (String, Vec<String>, DMatrix<f64>) {
    fs::create_dir_all(dir).unwrap();
    let n = 40;
    let mut x = DMatrix::zeros(n, 3);
    let mut labels = String::from("#label z k=2 values=a,b\n");
    let mut pairs = String::from("#pairs\n");
    let ids: Vec<String> = (0..n).map(|i| format!("w{i:02}")).collect();
    for i in 0..n {
        let z = i % 2;
        let a = ((i * 7) % 11) as f64 / 3.0 - 1.5;
        let b = ((i * 5) % 13) as f64 / 4.0 - 1.0;
        let c = if z == 0 {
            0.5 * a + 2.0
        } else {
            -0.25 * b - 2.0
        };
        x.row_mut(i).copy_from_slice(&[a, b, c]);
        labels.push_str(&format!("{} {z}\n", ids[i]));
        pairs.push_str(&format!("{} {z} - identity\n", ids[i]));
    }
    let x = x.map(|v| v as f32 as f64);
    write_embeddings(
        &EmbeddingSet::from_matrix(ids.clone(), &x).unwrap(),
        dir.join("embeddings.bin"),
    )
    .unwrap();
    fs::write(dir.join("z.labels"), labels).unwrap();
    fs::write(dir.join("pairs.txt"), pairs).unwrap();
    fs::write(
        dir.join("manifest.txt"),
        "embeddings=embeddings.bin\nlabel.z=z.labels\npairs=pairs.txt\n",
    )
    .unwrap();
    (s(&dir.join("manifest.txt")), ids, x)
}

#[test]
fn identity_pairs_reproduce_the_input() {
    let t = tempfile::tempdir().unwrap();
    let (manifest, ids, x) = write_noiseless(&t.path().join("d"));
    let fit = t.path().join("fit");
    run_ok(&[
        "fit-cfr",
        "--manifest",
        &manifest,
        "--lambda",
        "0",
        "--setting",
        "binary",
        "--out",
        &s(&fit),
    ]);
    let out = t.path().join("apply");
    run_ok(&[
        "apply-cfr",
        "--manifest",
        &manifest,
        "--projector",
        &s(&fit.join("projector.bin")),
        "--model",
        &s(&fit.join("model.bin")),
        "--setting",
        "binary",
        "--out",
        &s(&out),
    ]);
    let cfr = read_matrix(out.join("cfr.bin")).unwrap();
    assert_eq!(cfr.ids.len(), ids.len());
    let m = cfr.to_matrix();
    for i in 0..ids.len() {
        let err = (m.row(i) - x.row(i)).norm();
        assert!(err < 1e-6, "row {i}: {err}");
    }
}

#[test]
fn augment_doubles_a_small_dataset() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    fs::create_dir_all(&d).unwrap();
    let ids: Vec<String> = (0..4).map(|i| format!("r{i}")).collect();
    let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 0.5]);
    write_embeddings(
        &EmbeddingSet::from_matrix(ids.clone(), &x).unwrap(),
        d.join("embeddings.bin"),
    )
    .unwrap();
    fs::write(
        d.join("z.labels"),
        "#label z k=2 values=f,m\nr0 0\nr1 1\nr2 0\nr3 1\n",
    )
    .unwrap();
    fs::write(
        d.join("y.labels"),
        "#label y k=2 values=n,p\nr0 0\nr1 0\nr2 1\nr3 1\n",
    )
    .unwrap();
    fs::write(
        d.join("manifest.txt"),
        "embeddings=embeddings.bin\nlabel.z=z.labels\nlabel.y=y.labels\n",
    )
    .unwrap();
    let manifest = s(&d.join("manifest.txt"));
    let fit = t.path().join("fit");
    run_ok(&[
        "fit-cfr",
        "--manifest",
        &manifest,
        "--lambda",
        "0.1",
        "--out",
        &s(&fit),
    ]);
    let out = t.path().join("aug");
    run_ok(&[
        "augment",
        "--manifest",
        &manifest,
        "--projector",
        &s(&fit.join("projector.bin")),
        "--model",
        &s(&fit.join("model.bin")),
        "--out",
        &s(&out),
    ]);
    let aug = read_embeddings(out.join("augmented.bin")).unwrap();
    assert_eq!(aug.len(), 8);
    assert_eq!(report_value(&out, "augmented_rows"), "8");
    assert!(aug.position("r3.aug").is_some());
}
