//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use shortcut_audit::coreset::{build_coreset, CoresetConfig};
use shortcut_audit::corpus::{self, Corpus, EmbeddingMatrix, Variant};
use shortcut_audit::diagnostics::{
    context_ratios, context_ratios_from_maps, cross_flank_eval_with, danger_scan, mirror_diagnostics,
    mirror_self_scores, mirrored_query_ratio, write_audit_csv, AuditRow, LateralityTier,
};
use shortcut_audit::geometry::native_scores_with;
use shortcut_audit::losslab;
use shortcut_audit::masklab::{self, VARIANT_DIRS};
use shortcut_audit::retrieval::{evaluate_with, identity_rebalance_check, EvalResult};
use shortcut_audit::stats::{correlate, paired_pipeline, PerQueryMetrics};

use crate::bundle::Bundle;
use crate::{Failure, GlobalArgs, Selection, SplitArg};

/// Present blocks carry their payload; absent ones say why.
#[derive(Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum Block<T> {
    Present(T),
    Absent { reason: String },
}

fn load(g: &GlobalArgs) -> Result<(Corpus, &Path), Failure> {
    let path = g
        .manifest
        .as_deref()
        .ok_or_else(|| Failure::usage("this command needs --manifest"))?;
    Ok((corpus::load_corpus(path)?, path))
}

fn stem(m: &EmbeddingMatrix) -> String {
    format!("{}__{}", m.model_id, m.variant)
}

fn check_models(corpus: &Corpus, models: &[String]) -> Result<(), Failure> {
    let known = corpus.models();
    for m in models {
        if !known.contains(m) {
            return Err(Failure::data(format!("unknown model {m:?}")));
        }
    }
    Ok(())
}

/// Embeddings matching the selection, in (model, variant) order.
fn selected<'a>(corpus: &'a Corpus, sel: &Selection) -> Result<Vec<&'a EmbeddingMatrix>, Failure> {
    check_models(corpus, &sel.models)?;
    let mut out: Vec<&EmbeddingMatrix> = corpus
        .embeddings()
        .filter(|m| sel.models.is_empty() || sel.models.contains(&m.model_id))
        .filter(|m| sel.variants.is_empty() || sel.variants.contains(&m.variant))
        .collect();
    out.sort_by_key(|m| m.key());
    if out.is_empty() {
        return Err(Failure::data("no embeddings match the selection"));
    }
    Ok(out)
}

/// Keeps only the rows whose image belongs to `split`.
fn restrict(m: &EmbeddingMatrix, corpus: &Corpus, split: Option<SplitArg>) -> Result<EmbeddingMatrix, Failure> {
    let Some(split) = split else {
        return Ok(m.clone());
    };
    let split = split.into();
    let ids: Vec<String> = m
        .ids()
        .iter()
        .filter(|id| corpus.record(id).is_some_and(|r| r.split == split))
        .cloned()
        .collect();
    if ids.is_empty() {
        return Err(Failure::data(format!("{}: no images in the requested split", stem(m))));
    }
    Ok(m.select(&ids)?)
}

fn split_name(split: Option<SplitArg>) -> Value {
    match split {
        None => Value::Null,
        Some(SplitArg::Train) => json!("train"),
        Some(SplitArg::Test) => json!("test"),
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Failure::internal(e.to_string()))?;
    Ok(buf)
}

fn evaluate_checked(g: &GlobalArgs, m: &EmbeddingMatrix, corpus: &Corpus) -> Result<EvalResult, Failure> {
    let scores = native_scores_with(g.exec(), m, m)?;
    evaluate_scores(g, &scores, corpus, &stem(m))
}

fn evaluate_scores(
    g: &GlobalArgs,
    scores: &shortcut_audit::geometry::ScoreMatrix,
    corpus: &Corpus,
    what: &str,
) -> Result<EvalResult, Failure> {
    let r = evaluate_with(g.exec(), scores, corpus, &g.ks)?;
    let check = identity_rebalance_check(&r, corpus)?;
    if (check - r.map_macro).abs() > 1e-12 {
        return Err(Failure::internal(format!(
            "{what}: macro mAP {} disagrees with identity regrouping {check}",
            r.map_macro
        )));
    }
    Ok(r)
}

pub fn eval(g: &GlobalArgs, sel: &Selection) -> Result<(), Failure> {
    let (corpus, manifest) = load(g)?;
    let config = json!({
        "models": sel.models,
        "variants": sel.variants.iter().map(|v| v.as_str()).collect::<Vec<_>>(),
        "split": split_name(sel.split),
        "ks": g.ks,
    });
    let mut bundle = Bundle::create(&g.out, "eval", config)?;
    bundle.input(manifest)?;
    for m in selected(&corpus, sel)? {
        let m = restrict(m, &corpus, sel.split)?;
        let name = stem(&m);
        let scores = native_scores_with(g.exec(), &m, &m)?;
        let r = evaluate_scores(g, &scores, &corpus, &name)?;
        let summary = json!({
            "model": m.model_id,
            "variant": m.variant,
            "space": m.space,
            "n_images": m.len(),
            "n_queries": r.n_queries(),
            "map_macro": r.map_macro,
            "map_micro": r.map_micro,
            "cmc": r.cmc,
            "excluded_queries": r.excluded_queries,
        });
        bundle.write_json(&format!("{name}.eval.json"), &summary)?;
        bundle.write(
            &format!("{name}.per_query.csv"),
            &csv_bytes(|w| r.write_per_query_csv(w))?,
        )?;
        bundle.write(&format!("{name}.submission.csv"), &csv_bytes(|w| scores.write_csv(w))?)?;
    }
    finish(bundle)
}

fn finish(bundle: Bundle) -> Result<(), Failure> {
    let dir = bundle.dir().to_path_buf();
    let hash = bundle.finish()?;
    eprintln!("wrote {} (run {})", dir.display(), &hash[..12]);
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct AuditArgs {
    /// Restrict to these models (repeatable); default all.
    #[arg(long = "model")]
    pub models: Vec<String>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Audit precomputed per-model numbers instead of embeddings. Columns:
    /// model,map and optionally fg_map,inpainted_map,bgfg,mirror_sim.
    #[arg(long, conflicts_with = "split")]
    pub from_table: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct TableRow {
    model: String,
    map: f64,
    #[serde(default)]
    fg_map: Option<f64>,
    #[serde(default)]
    inpainted_map: Option<f64>,
    #[serde(default)]
    bgfg: Option<f64>,
    #[serde(default)]
    mirror_sim: Option<f64>,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Failure> {
    let err = |e: csv::Error| Failure::data(format!("{}: {e}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(err)?;
    reader.deserialize().map(|r| r.map_err(err)).collect()
}

pub fn audit(g: &GlobalArgs, a: &AuditArgs) -> Result<(), Failure> {
    let config = json!({
        "models": a.models,
        "split": split_name(a.split),
        "ks": g.ks,
        "bootstrap": g.bootstrap,
        "seed": g.seed,
        "from_table": a.from_table.is_some(),
    });
    let (rows, models, skipped, mut bundle) = match &a.from_table {
        Some(table) => {
            let mut bundle = Bundle::create(&g.out, "audit", config)?;
            bundle.input(table)?;
            let (rows, models) = audit_table(table, &a.models)?;
            (rows, models, Vec::new(), bundle)
        }
        None => {
            let (corpus, manifest) = load(g)?;
            let mut bundle = Bundle::create(&g.out, "audit", config)?;
            bundle.input(manifest)?;
            let (rows, models, skipped) = audit_corpus(g, &corpus, a)?;
            (rows, models, skipped, bundle)
        }
    };

    let mut rows = rows;
    rows.sort_by(|x, y| y.map.total_cmp(&x.map).then_with(|| x.model.cmp(&y.model)));
    let paired: Vec<&AuditRow> = rows
        .iter()
        .filter(|r| r.bgfg.is_some() && r.mirror_sim.is_some())
        .collect();
    let correlation = if paired.len() < 3 {
        Block::Absent { reason: "n < 3".into() }
    } else {
        let x: Vec<f64> = paired.iter().map(|r| r.bgfg.unwrap()).collect();
        let y: Vec<f64> = paired.iter().map(|r| r.mirror_sim.unwrap()).collect();
        match correlate(g.exec(), &x, &y, g.bootstrap, g.seed) {
            Ok(c) => Block::Present(json!({
                "x": "bgfg",
                "y": "mirror_sim",
                "models": paired.iter().map(|r| &r.model).collect::<Vec<_>>(),
                "result": c,
            })),
            Err(e) => Block::Absent { reason: e.to_string() },
        }
    };
    bundle.write("audit_table.csv", &csv_bytes(|w| write_audit_csv(&rows, w))?)?;
    let report = json!({
        "table": rows,
        "models": models,
        "skipped": skipped,
        "correlation": correlation,
    });
    bundle.write_json("audit.json", &report)?;
    finish(bundle)
}

fn audit_table(path: &Path, only: &[String]) -> Result<(Vec<AuditRow>, Vec<Value>), Failure> {
    let table: Vec<TableRow> = read_csv(path)?;
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for t in table {
        if !only.is_empty() && !only.contains(&t.model) {
            continue;
        }
        if !seen.insert(t.model.clone()) {
            return Err(Failure::data(format!(
                "duplicate model {:?} in {}",
                t.model,
                path.display()
            )));
        }
        let context = match (t.fg_map, t.inpainted_map) {
            (Some(fg), Some(inp)) => Some(context_ratios_from_maps(fg, inp, None, None)?),
            _ => None,
        };
        let bgfg = context.as_ref().map(|c| c.bgfg).or(t.bgfg);
        let row = AuditRow {
            model: t.model.clone(),
            map: t.map,
            bgfg,
            risk: bgfg.map(shortcut_audit::diagnostics::RiskTier::from_ratio),
            mirror_sim: t.mirror_sim,
            tier: t.mirror_sim.map(LateralityTier::from_mean),
        };
        models.push(json!({ "model": t.model, "map": t.map, "context_ratios": context, "row": row }));
        rows.push(row);
    }
    Ok((rows, models))
}

/// Table rows, per-model detail and skipped-model notes.
type AuditParts = (Vec<AuditRow>, Vec<Value>, Vec<Value>);

fn audit_corpus(g: &GlobalArgs, corpus: &Corpus, a: &AuditArgs) -> Result<AuditParts, Failure> {
    check_models(corpus, &a.models)?;
    let exec = g.exec();
    let mut rows = Vec::new();
    let mut models = Vec::new();
    let mut skipped = Vec::new();
    for model in corpus.models() {
        if !a.models.is_empty() && !a.models.contains(&model) {
            continue;
        }
        let get = |v: Variant| -> Result<Option<EmbeddingMatrix>, Failure> {
            corpus
                .embedding(&model, v)
                .map(|m| restrict(m, corpus, a.split))
                .transpose()
        };
        let (Some(fg), Some(inp)) = (get(Variant::Foreground)?, get(Variant::Inpainted)?) else {
            let missing: Vec<&str> = [Variant::Foreground, Variant::Inpainted]
                .into_iter()
                .filter(|&v| corpus.embedding(&model, v).is_none())
                .map(Variant::as_str)
                .collect();
            eprintln!("warning: skipping {model}: missing {}", missing.join(", "));
            skipped.push(json!({ "model": model, "missing": missing }));
            continue;
        };
        let fg_scores = native_scores_with(exec, &fg, &fg)?;
        let fg_eval = evaluate_scores(g, &fg_scores, corpus, &stem(&fg))?;
        let inp_eval = evaluate_checked(g, &inp, corpus)?;
        let bg_sil = get(Variant::BgSilhouette)?
            .map(|m| evaluate_checked(g, &m, corpus))
            .transpose()?;
        let sil = get(Variant::Silhouette)?
            .map(|m| evaluate_checked(g, &m, corpus))
            .transpose()?;
        let context = context_ratios(&fg_eval, &inp_eval, bg_sil.as_ref(), sil.as_ref())?;

        let full = get(Variant::FullRgb)?;
        let (map_variant, scores, primary_eval) = match &full {
            Some(m) => {
                let scores = native_scores_with(exec, m, m)?;
                let eval = evaluate_scores(g, &scores, corpus, &stem(m))?;
                (Variant::FullRgb, scores, eval)
            }
            None => (Variant::Foreground, fg_scores, fg_eval.clone()),
        };

        let mut laterality = None;
        let mut danger = None;
        let mut mirrored = None;
        if let Some(mirror) = get(Variant::Mirror)? {
            let cross = native_scores_with(exec, &mirror, &fg)?;
            let report = mirror_diagnostics(&mirror_self_scores(&fg, &mirror)?, &cross, corpus)?;
            danger = Some(danger_scan(&report, corpus)?);
            let mirrored_eval = evaluate_scores(g, &cross, corpus, &format!("{model}__mirror"))?;
            mirrored = Some(mirrored_query_ratio(&fg_eval, &mirrored_eval)?);
            laterality = Some(report);
        }

        let cross_flank = match cross_flank_eval_with(exec, &scores, corpus) {
            Ok(r) => Block::Present(r),
            Err(e) => Block::Absent { reason: e.to_string() },
        };

        let row = AuditRow {
            model: model.clone(),
            map: primary_eval.map_macro,
            bgfg: Some(context.bgfg),
            risk: Some(context.risk),
            mirror_sim: laterality.as_ref().map(|l| l.mirror_sim_mean),
            tier: laterality.as_ref().map(|l| l.tier),
        };
        models.push(json!({
            "model": model,
            "map": primary_eval.map_macro,
            "map_variant": map_variant,
            "cmc": primary_eval.cmc,
            "context_ratios": context,
            "laterality": laterality,
            "danger_scan": danger,
            "mirrored_query": mirrored,
            "cross_flank": cross_flank,
        }));
        rows.push(row);
    }
    if rows.is_empty() && skipped.is_empty() {
        return Err(Failure::data("no models to audit"));
    }
    Ok((rows, models, skipped))
}

pub fn crossflank(g: &GlobalArgs, sel: &Selection) -> Result<(), Failure> {
    let (corpus, manifest) = load(g)?;
    let config = json!({
        "models": sel.models,
        "variants": sel.variants.iter().map(|v| v.as_str()).collect::<Vec<_>>(),
        "split": split_name(sel.split),
    });
    let mut bundle = Bundle::create(&g.out, "crossflank", config)?;
    bundle.input(manifest)?;
    for m in selected(&corpus, sel)? {
        let m = restrict(m, &corpus, sel.split)?;
        let scores = native_scores_with(g.exec(), &m, &m)?;
        let report = cross_flank_eval_with(g.exec(), &scores, &corpus)?;
        bundle.write_json(&format!("{}.crossflank.json", stem(&m)), &report)?;
    }
    finish(bundle)
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    /// Long-format per-query values: model,seed,endpoint,image_id,value.
    #[arg(long, required_unless_present = "runs")]
    pub metrics: Option<PathBuf>,
    /// model,seed,path rows pointing at per-query CSVs written by `eval`;
    /// endpoints are `map` and `cmc@K` for every K in --ks.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// model_a,model_b rows; each pair is its own Holm family.
    #[arg(long)]
    pub pairs: PathBuf,
}

#[derive(Debug, Deserialize)]
struct MetricRow {
    model: String,
    seed: u64,
    endpoint: String,
    image_id: String,
    value: f64,
}

#[derive(Debug, Deserialize)]
struct RunRow {
    model: String,
    seed: u64,
    path: PathBuf,
}

#[derive(Debug, Deserialize)]
struct PerQueryRow {
    image_id: String,
    ap: f64,
    first_correct_rank: usize,
}

#[derive(Debug, Deserialize)]
struct PairRow {
    model_a: String,
    model_b: String,
}

fn insert_metric(
    metrics: &mut PerQueryMetrics,
    key: (String, u64, String),
    image_id: String,
    value: f64,
) -> Result<(), Failure> {
    if !value.is_finite() {
        return Err(Failure::data(format!("non-finite value for {key:?} {image_id}")));
    }
    let slot = metrics.entry(key.clone()).or_default();
    if slot.insert(image_id.clone(), value).is_some() {
        return Err(Failure::data(format!("duplicate value for {key:?} {image_id}")));
    }
    Ok(())
}

pub fn stats(g: &GlobalArgs, a: &StatsArgs) -> Result<(), Failure> {
    let config = json!({ "alpha": g.alpha, "ks": g.ks });
    let mut bundle = Bundle::create(&g.out, "stats", config)?;
    let mut metrics = PerQueryMetrics::new();
    if let Some(path) = &a.metrics {
        bundle.input(path)?;
        for r in read_csv::<MetricRow>(path)? {
            insert_metric(&mut metrics, (r.model, r.seed, r.endpoint), r.image_id, r.value)?;
        }
    }
    if let Some(path) = &a.runs {
        bundle.input(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for run in read_csv::<RunRow>(path)? {
            let file = if run.path.is_absolute() {
                run.path.clone()
            } else {
                base.join(&run.path)
            };
            bundle.input(&file)?;
            for q in read_csv::<PerQueryRow>(&file)? {
                let key = |e: &str| (run.model.clone(), run.seed, e.to_string());
                insert_metric(&mut metrics, key("map"), q.image_id.clone(), q.ap)?;
                for &k in &g.ks {
                    let hit = (q.first_correct_rank <= k) as u8 as f64;
                    insert_metric(&mut metrics, key(&format!("cmc@{k}")), q.image_id.clone(), hit)?;
                }
            }
        }
    }
    bundle.input(&a.pairs)?;
    let pairs: Vec<(String, String)> = read_csv::<PairRow>(&a.pairs)?
        .into_iter()
        .map(|p| (p.model_a, p.model_b))
        .collect();
    let report = paired_pipeline(&metrics, &pairs, g.alpha)?;
    for r in &report.rejected {
        match &r.endpoint {
            Some(e) => eprintln!("warning: {} vs {} [{e}]: {}", r.model_a, r.model_b, r.reason),
            None => eprintln!("warning: {} vs {} skipped: {}", r.model_a, r.model_b, r.reason),
        }
    }
    bundle.write("paired.csv", &csv_bytes(|w| report.write_csv(w))?)?;
    bundle.write_json("paired.json", &report)?;
    finish(bundle)
}

#[derive(Debug, Clone, Args)]
pub struct CoresetArgs {
    /// Model whose embeddings are used.
    #[arg(long)]
    pub model: String,
    /// Embedding variant of that model.
    #[arg(long, default_value = "foreground")]
    pub variant: Variant,
    /// Restrict images to one split.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Facility-location coverage to reach.
    #[arg(long, default_value_t = 0.95)]
    pub target: f64,
    /// Percentile of max cross-identity similarity marking boundary images.
    #[arg(long, default_value_t = 75.0)]
    pub boundary_percentile: f64,
    /// Coverage a boundary swap may give up.
    #[arg(long, default_value_t = 0.005)]
    pub swap_tolerance: f64,
}

pub fn coreset(g: &GlobalArgs, a: &CoresetArgs) -> Result<(), Failure> {
    let (corpus, manifest) = load(g)?;
    let cfg = CoresetConfig {
        target_coverage: a.target,
        boundary_percentile: a.boundary_percentile,
        swap_tolerance: a.swap_tolerance,
        seed: g.seed,
        ..CoresetConfig::default()
    };
    let config = json!({
        "model": a.model,
        "variant": a.variant,
        "split": split_name(a.split),
        "coreset": cfg,
    });
    let mut bundle = Bundle::create(&g.out, "coreset", config)?;
    bundle.input(manifest)?;
    let m = corpus
        .embedding(&a.model, a.variant)
        .ok_or_else(|| Failure::data(format!("no embedding {}/{}", a.model, a.variant)))?;
    let m = restrict(m, &corpus, a.split)?;
    let selection = build_coreset(g.exec(), &corpus, &m, &cfg)?;
    let name = stem(&m);
    bundle.write(&format!("{name}.ids.txt"), selection.id_list().as_bytes())?;
    bundle.write_json(&format!("{name}.coreset.json"), &selection)?;
    finish(bundle)
}

#[derive(Debug, Clone, Args)]
pub struct MasksArgs {
    /// Directory of RGBA PNGs; the alpha channel is the mask.
    #[arg(long)]
    pub input: PathBuf,
    /// Thresholds for the fraction of masks below a solidity.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5])]
    pub thresholds: Vec<f64>,
}

pub fn masks(g: &GlobalArgs, a: &MasksArgs) -> Result<(), Failure> {
    let config = json!({ "thresholds": a.thresholds });
    let mut bundle = Bundle::create(&g.out, "masks", config)?;
    let mut inputs: Vec<PathBuf> = fs::read_dir(&a.input)
        .map_err(|e| Failure::data(format!("{}: {e}", a.input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    inputs.sort();
    for p in &inputs {
        bundle.input(p)?;
    }
    let stats = masklab::process_directory(g.exec(), &a.input, bundle.dir())?;
    for s in &stats {
        for dir in VARIANT_DIRS {
            bundle.adopt(&format!("{dir}/{}.png", s.image_id))?;
        }
    }
    let solidity: Vec<f64> = stats.iter().map(|s| s.solidity).collect();
    let summary = masklab::solidity_summary(&solidity, &a.thresholds)?;
    bundle.write("mask_stats.csv", &csv_bytes(|w| masklab::write_stats_csv(&stats, w))?)?;
    bundle.write_json("solidity_summary.json", &summary)?;
    finish(bundle)
}

#[derive(Debug, Clone, Args)]
pub struct LossCheckArgs {
    /// Number of seeded batches; batch i uses seed `--seed + i`.
    #[arg(long, default_value_t = 1)]
    pub batches: u64,
}

pub fn loss_check(g: &GlobalArgs, a: &LossCheckArgs) -> Result<(), Failure> {
    let config = json!({ "batches": a.batches, "seed": g.seed });
    let mut bundle = Bundle::create(&g.out, "loss-check", config)?;
    let mut batches = Vec::new();
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut passed = true;
    for i in 0..a.batches {
        let seed = g.seed.wrapping_add(i);
        let checks = losslab::loss_check(seed).map_err(|e| Failure::internal(e.to_string()))?;
        for c in &checks {
            passed &= c.passed;
            let w = worst.entry(c.objective.clone()).or_insert(0.0);
            *w = w.max(c.max_rel_error);
        }
        batches.push(json!({ "seed": seed, "checks": checks }));
    }
    let report = json!({ "passed": passed, "max_rel_error": worst, "batches": batches });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    bundle.write_json("loss_check.json", &report)?;
    finish(bundle)?;
    if passed {
        Ok(())
    } else {
        Err(Failure::internal("gradient check failed"))
    }
}

#[derive(Debug, Clone, Args)]
pub struct DedupArgs {
    /// Model whose embeddings are used.
    #[arg(long)]
    pub model: String,
    /// Embedding variant of that model.
    #[arg(long, default_value = "foreground")]
    pub variant: Variant,
    /// Pairs with cosine similarity strictly above this are reported.
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,
}

pub fn dedup(g: &GlobalArgs, a: &DedupArgs) -> Result<(), Failure> {
    let (corpus, manifest) = load(g)?;
    let config = json!({ "model": a.model, "variant": a.variant, "threshold": a.threshold });
    let mut bundle = Bundle::create(&g.out, "dedup", config)?;
    bundle.input(manifest)?;
    let m = corpus
        .embedding(&a.model, a.variant)
        .ok_or_else(|| Failure::data(format!("no embedding {}/{}", a.model, a.variant)))?;
    let pairs = corpus::find_near_duplicates(&corpus::l2_normalize(m)?, a.threshold)?;
    let bytes = csv_bytes(|w| {
        use std::io::Write;
        writeln!(w, "a,b,similarity")?;
        for p in &pairs {
            writeln!(w, "{},{},{:.6}", p.a, p.b, p.similarity)?;
        }
        Ok(())
    })?;
    bundle.write(&format!("{}.duplicates.csv", stem(m)), &bytes)?;
    finish(bundle)
}
