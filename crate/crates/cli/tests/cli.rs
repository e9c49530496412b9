mod common;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use shortcut_audit::corpus::{save_corpus, EmbeddingMatrix, Variant};
use shortcut_audit::stats::holm_adjust;

use common::{run, tree, Synthetic};

fn corpus_dir(dir: &Path, variants: &[Variant]) -> String {
    let corpus = Synthetic::new(vec![4, 5, 3, 6], 12, 3).only(variants).build("alpha");
    save_corpus(&corpus, dir.join("corpus"))
        .unwrap()
        .to_str()
        .unwrap()
        .to_string()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn eval_writes_reports_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus_dir(dir.path(), &[Variant::Foreground]);
    let out = dir.path().join("out");
    let o = run(&["eval", "--manifest", &manifest, "--out", s(&out)], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "alpha__foreground.eval.json",
        "alpha__foreground.per_query.csv",
        "alpha__foreground.submission.csv",
    ] {
        assert!(out.join("eval").join(f).is_file(), "{f} missing");
    }
    let report = json(out.join("eval/alpha__foreground.eval.json"));
    let map = report["map_macro"].as_f64().expect("macro mAP present");
    assert!((0.0..=1.0).contains(&map));
    let manifest = json(out.join("eval/run_manifest.json"));
    assert_eq!(manifest["command"], "eval");
    assert_eq!(manifest["run_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn missing_blob_is_a_data_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus_dir(dir.path(), &[Variant::Foreground, Variant::Inpainted]);
    fs::remove_file(dir.path().join("corpus/alpha__inpainted.f32")).unwrap();
    let o = run(
        &["eval", "--manifest", &manifest, "--out", s(&dir.path().join("out"))],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("alpha/inpainted"), "{err}");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus_dir(dir.path(), &Variant::ALL);
    let outs: Vec<_> = ["a", "b"]
        .iter()
        .map(|label| {
            let out = dir.path().join(label);
            for cmd in ["eval", "audit", "crossflank"] {
                let o = run(
                    &[cmd, "--manifest", &manifest, "--out", s(&out), "--bootstrap", "1000"],
                    None,
                );
                assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
            }
            tree(&out)
        })
        .collect();
    assert!(!outs[0].is_empty());
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn single_model_audit_has_no_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus_dir(dir.path(), &Variant::ALL);
    let out = dir.path().join("out");
    let o = run(&["audit", "--manifest", &manifest, "--out", s(&out)], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(out.join("audit/audit.json"));
    assert_eq!(report["correlation"]["status"], "absent");
    assert_eq!(report["correlation"]["reason"], "n < 3");
    let row = &report["table"][0];
    assert_eq!(row["model"], "alpha");
    assert!(row["bgfg"].as_f64().unwrap() < 0.95);
    assert_eq!(row["risk"], "LOW");
}

#[test]
fn identical_mirror_embeddings_are_tier_four() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = Synthetic::new(vec![4, 5, 3, 6], 12, 3)
        .only(&[Variant::Foreground, Variant::Inpainted])
        .build("alpha");
    let fg = corpus.embedding("alpha", Variant::Foreground).unwrap().clone();
    let mirror = EmbeddingMatrix::new(
        "alpha",
        Variant::Mirror,
        fg.dim(),
        fg.ids().to_vec(),
        fg.data().to_vec(),
    )
    .unwrap();
    corpus.add_embedding(mirror).unwrap();
    let manifest = save_corpus(&corpus, dir.path().join("corpus")).unwrap();
    let out = dir.path().join("out");
    let o = run(&["audit", "--manifest", s(&manifest), "--out", s(&out)], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let row = &json(out.join("audit/audit.json"))["table"][0];
    assert_eq!(row["tier"], "T4");
    assert!((row["mirror_sim"].as_f64().unwrap() - 1.0).abs() < 1e-6);
}

fn write_metrics(path: &Path, models: &[(&str, f64)], endpoints: &[&str], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("model,seed,endpoint,image_id,value\n");
    let base: Vec<f64> = (0..40 * 3 * endpoints.len()).map(|_| rng.random()).collect();
    for (model, shift) in models {
        let mut b = base.iter();
        for s in [1, 2, 3] {
            for endpoint in endpoints {
                for q in 0..40 {
                    let noise: f64 = if *shift == 0.0 && *model == models[0].0 {
                        0.0
                    } else {
                        rng.random_range(-0.1..0.1)
                    };
                    let bump = if *endpoint == "map" { *shift } else { 0.0 };
                    let v = b.next().unwrap() + noise + bump;
                    csv.push_str(&format!("{model},{s},{endpoint},q{q:02},{v}\n"));
                }
            }
        }
    }
    fs::write(path, csv).unwrap();
}

fn stats(dir: &Path, pairs: &str) -> (std::process::Output, Value) {
    fs::write(dir.join("pairs.csv"), pairs).unwrap();
    let out = dir.join("out");
    let o = run(
        &[
            "stats",
            "--metrics",
            s(&dir.join("metrics.csv")),
            "--pairs",
            s(&dir.join("pairs.csv")),
            "--out",
            s(&out),
        ],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(out.join("stats/paired.json"));
    (o, report)
}

#[test]
fn stats_supports_a_planted_shift() {
    let dir = tempfile::tempdir().unwrap();
    write_metrics(
        &dir.path().join("metrics.csv"),
        &[("a", 0.01), ("b", 0.3)],
        &["map", "cmc@1"],
        1,
    );
    let (_, report) = stats(dir.path(), "model_a,model_b\na,b\n");
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    let map = results.iter().find(|r| r["endpoint"] == "map").unwrap();
    assert_eq!(map["supported"], true);
    assert_eq!(map["seeds"], serde_json::json!([1, 2, 3]));
}

#[test]
fn stats_reports_degenerate_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("metrics.csv");
    write_metrics(&metrics, &[("a", 0.0)], &["map"], 2);
    let text = fs::read_to_string(&metrics).unwrap();
    let copy: String = text
        .lines()
        .skip(1)
        .map(|l| format!("{}\n", l.replacen("a,", "b,", 1)))
        .collect();
    fs::write(&metrics, text + &copy).unwrap();
    let (o, report) = stats(dir.path(), "model_a,model_b\na,b\n");
    assert!(report["results"].as_array().unwrap().is_empty());
    assert_eq!(report["rejected"].as_array().unwrap().len(), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("warning: a vs b [map]"), "{err}");
}

#[test]
fn each_pair_is_its_own_holm_family() {
    let dir = tempfile::tempdir().unwrap();
    write_metrics(
        &dir.path().join("metrics.csv"),
        &[("a", 0.01), ("b", 0.05), ("c", 0.2)],
        &["map", "cmc@1", "cmc@5"],
        3,
    );
    let (_, report) = stats(dir.path(), "model_a,model_b\na,b\na,c\nb,c\n");
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 9);
    for pair in [("a", "b"), ("a", "c"), ("b", "c")] {
        let family: Vec<&Value> = results
            .iter()
            .filter(|r| r["model_a"] == pair.0 && r["model_b"] == pair.1)
            .collect();
        assert_eq!(family.len(), 3);
        let raw: Vec<f64> = family.iter().map(|r| r["fisher_p"].as_f64().unwrap()).collect();
        let adjusted: Vec<f64> = family.iter().map(|r| r["holm_adjusted_p"].as_f64().unwrap()).collect();
        // serde_json's default float parser can be one ulp off.
        for (a, h) in adjusted.iter().zip(holm_adjust(&raw)) {
            assert!((a - h).abs() <= 1e-12 * h.abs(), "{pair:?}: {a} vs {h}");
        }
    }
}

#[test]
fn loss_check_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&["loss-check", "--batches", "2", "--out", s(&out)], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout["passed"], true);
    assert_eq!(stdout, json(out.join("loss-check/loss_check.json")));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for args in [
        vec!["frobnicate"],
        vec!["loss-check", "--ks", "5,1"],
        vec!["loss-check", "--alpha", "1.5"],
        vec!["loss-check", "--bootstrap", "10"],
        vec!["eval"],
    ] {
        let mut args = args;
        args.extend(["--out", s(&out)]);
        let o = run(&args, None);
        assert_eq!(
            o.status.code(),
            Some(1),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert_eq!(run(&["--help"], None).status.code(), Some(0));
}
