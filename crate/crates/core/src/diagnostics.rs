//! Shortcut diagnostics.
//!
//! Background axis: ratios of inpainted (and silhouette) mAP to foreground
//! mAP, banded into risk tiers. Laterality axis: similarity of an image to
//! its own mirror, the best different-identity match of that mirror, the
//! danger margin between the two, and the cross-flank retrieval protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EmbeddingMatrix, Flank};
use crate::error::{Error, Result};
use crate::geometry::{native_pair_score, native_scores_with, ScoreMatrix};
use crate::par::Execution;
use crate::retrieval::{evaluate_subset, CmcPoint, EvalResult};
use crate::stats::average_ranks;

pub const RISK_LOW_BELOW: f64 = 0.95;
pub const RISK_HIGH_ABOVE: f64 = 1.10;
pub const TIER_CUTS: [f64; 3] = [0.85, 0.96, 0.99];
pub const CROSS_FLANK_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RiskTier {
    Low,
    Medium,
    High,
}

impl RiskTier {
    /// LOW below 0.95, HIGH above 1.10, MEDIUM on the closed band between.
    pub fn from_ratio(bgfg: f64) -> RiskTier {
        if bgfg < RISK_LOW_BELOW {
            RiskTier::Low
        } else if bgfg <= RISK_HIGH_ABOVE {
            RiskTier::Medium
        } else {
            RiskTier::High
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RiskTier::Low => "LOW",
            RiskTier::Medium => "MEDIUM",
            RiskTier::High => "HIGH",
        }
    }
}

impl fmt::Display for RiskTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LateralityTier {
    T1,
    T2,
    T3,
    T4,
}

impl LateralityTier {
    /// Bands on the mean mirror similarity, closed on the left.
    pub fn from_mean(mirror_sim_mean: f64) -> LateralityTier {
        let [a, b, c] = TIER_CUTS;
        if mirror_sim_mean < a {
            LateralityTier::T1
        } else if mirror_sim_mean < b {
            LateralityTier::T2
        } else if mirror_sim_mean < c {
            LateralityTier::T3
        } else {
            LateralityTier::T4
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LateralityTier::T1 => "laterality-aware",
            LateralityTier::T2 => "moderate shortcut",
            LateralityTier::T3 => "strong shortcut",
            LateralityTier::T4 => "near-perfect symmetry",
        }
    }
}

impl fmt::Display for LateralityTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRatios {
    pub fg_map: f64,
    pub inpainted_map: f64,
    pub bg_sil_map: Option<f64>,
    pub sil_map: Option<f64>,
    pub bgfg: f64,
    pub bgsilfg: Option<f64>,
    pub silfg: Option<f64>,
    pub risk: RiskTier,
}

/// Context ratios from macro mAPs already computed elsewhere.
pub fn context_ratios_from_maps(
    fg_map: f64,
    inpainted_map: f64,
    bg_sil_map: Option<f64>,
    sil_map: Option<f64>,
) -> Result<ContextRatios> {
    if !(fg_map > 0.0) || !fg_map.is_finite() {
        return Err(Error::invalid(format!("foreground mAP must be positive, got {fg_map}")));
    }
    let bgfg = inpainted_map / fg_map;
    Ok(ContextRatios {
        fg_map,
        inpainted_map,
        bg_sil_map,
        sil_map,
        bgfg,
        bgsilfg: bg_sil_map.map(|m| m / fg_map),
        silfg: sil_map.map(|m| m / fg_map),
        risk: RiskTier::from_ratio(bgfg),
    })
}

/// Context ratios from per-variant evaluations; every mAP is the macro one.
pub fn context_ratios(
    fg: &EvalResult,
    inpainted: &EvalResult,
    bg_sil: Option<&EvalResult>,
    sil: Option<&EvalResult>,
) -> Result<ContextRatios> {
    for (name, other) in [
        ("inpainted", Some(inpainted)),
        ("bg_silhouette", bg_sil),
        ("silhouette", sil),
    ] {
        if let Some(other) = other {
            if !same_queries(fg, other) {
                return Err(Error::invalid(format!(
                    "{name} evaluation has a different query set than foreground"
                )));
            }
        }
    }
    context_ratios_from_maps(
        fg.map_macro,
        inpainted.map_macro,
        bg_sil.map(|r| r.map_macro),
        sil.map(|r| r.map_macro),
    )
}

fn same_queries(a: &EvalResult, b: &EvalResult) -> bool {
    a.per_query.keys().eq(b.per_query.keys()) && a.excluded_queries == b.excluded_queries
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MirrorScore {
    pub mirror_sim: f64,
    pub nn_sim: f64,
    pub danger_margin: f64,
    /// Gallery image that attains `nn_sim`.
    pub nn_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralityReport {
    pub mirror_sim_mean: f64,
    /// Population standard deviation.
    pub mirror_sim_std: f64,
    pub per_image: BTreeMap<String, MirrorScore>,
    pub tier: LateralityTier,
    pub positive_margin_ids: Vec<String>,
}

/// `scores_self[x]` is the score of `x` against its own mirror; row `x` of
/// `scores_cross` scores the mirror of `x` against every gallery image.
pub fn mirror_diagnostics(
    scores_self: &BTreeMap<String, f64>,
    scores_cross: &ScoreMatrix,
    corpus: &Corpus,
) -> Result<LateralityReport> {
    if scores_self.is_empty() {
        return Err(Error::invalid("no mirror scores"));
    }
    let row_of: BTreeMap<&str, usize> = scores_cross
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.as_str(), i))
        .collect();
    let g_ident: Vec<&str> = scores_cross
        .gallery
        .iter()
        .map(|g| corpus.identity_of(g))
        .collect::<Result<_>>()?;

    let mut per_image = BTreeMap::new();
    for (id, &mirror_sim) in scores_self {
        let identity = corpus.identity_of(id)?;
        let &row = row_of
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownId(format!("{id} (no mirrored query row)")))?;
        let scores = scores_cross.row(row);
        let mut best: Option<(f64, usize)> = None;
        for (g, &s) in scores.iter().enumerate() {
            if g_ident[g] == identity {
                continue;
            }
            // Ties go to the smaller gallery id.
            let better = match best {
                None => true,
                Some((b, bg)) => s > b || (s == b && scores_cross.gallery[g] < scores_cross.gallery[bg]),
            };
            if better {
                best = Some((s, g));
            }
        }
        let (nn_sim, g) =
            best.ok_or_else(|| Error::invalid(format!("image {id} has no different-identity candidate")))?;
        per_image.insert(
            id.clone(),
            MirrorScore {
                mirror_sim,
                nn_sim,
                danger_margin: nn_sim - mirror_sim,
                nn_id: scores_cross.gallery[g].clone(),
            },
        );
    }

    let n = per_image.len() as f64;
    let mean = per_image.values().map(|m| m.mirror_sim).sum::<f64>() / n;
    let var = per_image.values().map(|m| (m.mirror_sim - mean).powi(2)).sum::<f64>() / n;
    let positive_margin_ids = per_image
        .iter()
        .filter(|(_, m)| m.danger_margin > 0.0)
        .map(|(id, _)| id.clone())
        .collect();
    Ok(LateralityReport {
        mirror_sim_mean: mean,
        mirror_sim_std: var.sqrt(),
        tier: LateralityTier::from_mean(mean),
        per_image,
        positive_margin_ids,
    })
}

/// Mirror diagnostics straight from embeddings: `original` and `mirrored`
/// hold the same images, `gallery` is the foreground gallery.
pub fn mirror_diagnostics_from_embeddings(
    exec: Execution,
    original: &EmbeddingMatrix,
    mirrored: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    corpus: &Corpus,
) -> Result<LateralityReport> {
    let scores_self = mirror_self_scores(original, mirrored)?;
    let cross = native_scores_with(exec, mirrored, gallery)?;
    mirror_diagnostics(&scores_self, &cross, corpus)
}

/// Native score between each original row and its mirrored counterpart.
pub fn mirror_self_scores(original: &EmbeddingMatrix, mirrored: &EmbeddingMatrix) -> Result<BTreeMap<String, f64>> {
    if original.space != mirrored.space {
        return Err(Error::invalid(
            "original and mirrored embeddings live in different spaces",
        ));
    }
    let mut scores_self = BTreeMap::new();
    for (i, id) in original.ids().iter().enumerate() {
        let m = mirrored
            .row_of(id)
            .ok_or_else(|| Error::UnknownId(format!("{id} (missing mirrored embedding)")))?;
        scores_self.insert(id.clone(), native_pair_score(original.space, original.row(i), m));
    }
    Ok(scores_self)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DangerRow {
    pub identity: String,
    pub count: usize,
    pub count_positive: usize,
    pub mean_dm: f64,
    pub max_dm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DangerScan {
    /// Sorted by descending `max_dm`, then identity.
    pub rows: Vec<DangerRow>,
    pub count: usize,
    pub count_positive: usize,
    pub mean_dm: f64,
    pub median_dm: f64,
}

pub fn danger_scan(report: &LateralityReport, corpus: &Corpus) -> Result<DangerScan> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (id, m) in &report.per_image {
        groups.entry(corpus.identity_of(id)?).or_default().push(m.danger_margin);
    }
    let mut rows: Vec<DangerRow> = groups
        .into_iter()
        .map(|(identity, dms)| DangerRow {
            identity: identity.to_string(),
            count: dms.len(),
            count_positive: dms.iter().filter(|&&d| d > 0.0).count(),
            mean_dm: dms.iter().sum::<f64>() / dms.len() as f64,
            max_dm: dms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    rows.sort_by(|a, b| b.max_dm.total_cmp(&a.max_dm).then_with(|| a.identity.cmp(&b.identity)));

    let mut all: Vec<f64> = report.per_image.values().map(|m| m.danger_margin).collect();
    all.sort_by(f64::total_cmp);
    let n = all.len();
    let median_dm = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => all[n / 2],
        _ => (all[n / 2 - 1] + all[n / 2]) / 2.0,
    };
    Ok(DangerScan {
        count: n,
        count_positive: all.iter().filter(|&&d| d > 0.0).count(),
        mean_dm: all.iter().sum::<f64>() / n as f64,
        median_dm,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MirroredQueryRatio {
    pub regular_map: f64,
    pub mirrored_map: f64,
    pub ratio: f64,
    pub mirror_preferred: bool,
}

pub fn mirrored_query_ratio_from_maps(regular_map: f64, mirrored_map: f64) -> Result<MirroredQueryRatio> {
    if !(regular_map > 0.0) {
        return Err(Error::invalid(format!(
            "regular mAP must be positive, got {regular_map}"
        )));
    }
    let ratio = mirrored_map / regular_map;
    Ok(MirroredQueryRatio {
        regular_map,
        mirrored_map,
        ratio,
        mirror_preferred: ratio > 1.0,
    })
}

pub fn mirrored_query_ratio(regular: &EvalResult, mirrored: &EvalResult) -> Result<MirroredQueryRatio> {
    let idents = |r: &EvalResult| -> BTreeSet<String> { r.per_query.values().map(|q| q.identity.clone()).collect() };
    if idents(regular) != idents(mirrored) {
        return Err(Error::invalid(
            "regular and mirrored evaluations cover different identities",
        ));
    }
    mirrored_query_ratio_from_maps(regular.map_macro, mirrored.map_macro)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlankMetrics {
    pub map: f64,
    pub map_micro: f64,
    pub cmc: BTreeMap<usize, CmcPoint>,
    pub n_queries: usize,
    pub excluded_queries: Vec<String>,
}

impl From<EvalResult> for FlankMetrics {
    fn from(r: EvalResult) -> Self {
        FlankMetrics {
            map: r.map_macro,
            map_micro: r.map_micro,
            cmc: r.cmc,
            n_queries: r.per_query.len(),
            excluded_queries: r.excluded_queries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFlankReport {
    pub within: FlankMetrics,
    pub cross: FlankMetrics,
    /// Absent when no within-flank query has a positive.
    pub cross_within_ratio: Option<f64>,
    /// Same-identity minus different-identity mean cross-flank score;
    /// absent when either pool is empty.
    pub discriminability: Option<f64>,
    pub same_id_cross_mean: Option<f64>,
    pub diff_id_cross_mean: Option<f64>,
}

pub fn cross_within_ratio(cross_map: f64, within_map: f64) -> Result<f64> {
    if !(within_map > 0.0) {
        return Err(Error::invalid(format!(
            "within-flank mAP must be positive, got {within_map}"
        )));
    }
    Ok(cross_map / within_map)
}

pub fn cross_flank_eval(scores: &ScoreMatrix, corpus: &Corpus) -> Result<CrossFlankReport> {
    cross_flank_eval_with(Execution::default(), scores, corpus)
}

/// Within-flank (L->L, R->R) and cross-flank (L->R, R->L) retrieval over the
/// flank-labelled images of `scores`, both directions pooled.
pub fn cross_flank_eval_with(exec: Execution, scores: &ScoreMatrix, corpus: &Corpus) -> Result<CrossFlankReport> {
    let flank = |id: &str| -> Result<Flank> {
        corpus
            .record(id)
            .map(|r| r.flank)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    };
    let q_flank: Vec<Flank> = scores.queries.iter().map(|q| flank(q)).collect::<Result<_>>()?;
    let g_flank: Vec<Flank> = scores.gallery.iter().map(|g| flank(g)).collect::<Result<_>>()?;
    let lateral = |f: Flank| matches!(f, Flank::Left | Flank::Right);

    let mut sides: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for r in corpus.records() {
        let e = sides.entry(r.identity.as_str()).or_default();
        e.0 |= r.flank == Flank::Left;
        e.1 |= r.flank == Flank::Right;
    }
    if !sides.values().any(|&(l, r)| l && r) {
        return Err(Error::invalid("no identity has both a left and a right flank image"));
    }

    let query_rows: Vec<usize> = (0..scores.n_queries()).filter(|&q| lateral(q_flank[q])).collect();
    let ks = CROSS_FLANK_KS;
    let within = evaluate_subset(exec, scores, corpus, &ks, &query_rows, |q, g| g_flank[g] == q_flank[q])?;
    let cross = evaluate_subset(exec, scores, corpus, &ks, &query_rows, |q, g| {
        lateral(g_flank[g]) && g_flank[g] != q_flank[q]
    })?;

    let (mut same, mut diff) = ((0.0, 0usize), (0.0, 0usize));
    for &q in &query_rows {
        let qi = corpus.identity_of(&scores.queries[q])?;
        for g in 0..scores.n_gallery() {
            if !lateral(g_flank[g]) || g_flank[g] == q_flank[q] {
                continue;
            }
            let acc = if corpus.identity_of(&scores.gallery[g])? == qi {
                &mut same
            } else {
                &mut diff
            };
            acc.0 += scores.get(q, g);
            acc.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    let (same_id_cross_mean, diff_id_cross_mean) = (mean(same), mean(diff));
    let cross_within_ratio = if within.per_query.is_empty() {
        None
    } else {
        Some(cross_within_ratio(cross.map_macro, within.map_macro)?)
    };
    Ok(CrossFlankReport {
        within: within.into(),
        cross: cross.into(),
        cross_within_ratio,
        discriminability: same_id_cross_mean.zip(diff_id_cross_mean).map(|(s, d)| s - d),
        same_id_cross_mean,
        diff_id_cross_mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPercentile {
    pub mean_pct: f64,
    /// Population standard deviation across seeds.
    pub std_pct: f64,
}

/// Within each seed, ranks the models by ascending mean mirror similarity
/// and maps rank to `[0, 1]`; summarises each model across seeds.
pub fn mirror_rank_percentile(group: &[(String, u64, f64)]) -> Result<BTreeMap<String, RankPercentile>> {
    let mut cells: BTreeMap<u64, BTreeMap<&str, f64>> = BTreeMap::new();
    for (model, seed, value) in group {
        if cells.entry(*seed).or_default().insert(model.as_str(), *value).is_some() {
            return Err(Error::Duplicate {
                what: "(model, seed) cell",
                key: format!("{model}/{seed}"),
            });
        }
    }
    let models: BTreeSet<&str> = group.iter().map(|(m, _, _)| m.as_str()).collect();
    for (seed, row) in &cells {
        if row.len() != models.len() {
            let missing: Vec<&str> = models.iter().filter(|m| !row.contains_key(*m)).copied().collect();
            return Err(Error::invalid(format!(
                "ragged group: seed {seed} lacks {}",
                missing.join(", ")
            )));
        }
    }
    if models.len() < 2 {
        return Err(Error::invalid("rank percentiles need at least two models"));
    }
    let m = models.len() as f64;
    let mut pcts: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for row in cells.values() {
        let values: Vec<f64> = row.values().copied().collect();
        for ((model, _), rank) in row.iter().zip(average_ranks(&values)) {
            pcts.entry(model).or_default().push((rank - 1.0) / (m - 1.0));
        }
    }
    Ok(pcts
        .into_iter()
        .map(|(model, p)| {
            let n = p.len() as f64;
            let mean = p.iter().sum::<f64>() / n;
            let var = p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (
                model.to_string(),
                RankPercentile {
                    mean_pct: mean,
                    std_pct: var.sqrt(),
                },
            )
        })
        .collect())
}

/// One row of the model-level audit table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub model: String,
    pub map: f64,
    pub bgfg: Option<f64>,
    pub risk: Option<RiskTier>,
    pub mirror_sim: Option<f64>,
    pub tier: Option<LateralityTier>,
}

/// `model,map,bgfg,risk,mirror_sim,tier`; absent values are empty cells.
pub fn write_audit_csv<W: Write>(rows: &[AuditRow], mut w: W) -> std::io::Result<()> {
    fn opt<T: fmt::Display>(v: Option<T>) -> String {
        v.map(|x| x.to_string()).unwrap_or_default()
    }
    writeln!(w, "model,map,bgfg,risk,mirror_sim,tier")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{},{},{},{}",
            r.model,
            r.map,
            opt(r.bgfg.map(|x| format!("{x:.6}"))),
            opt(r.risk),
            opt(r.mirror_sim.map(|x| format!("{x:.6}"))),
            opt(r.tier),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ImageRecord, Split};
    use crate::geometry::ScoreKind;

    #[test]
    fn risk_bands() {
        assert_eq!(RiskTier::from_ratio(0.9499), RiskTier::Low);
        assert_eq!(RiskTier::from_ratio(0.95), RiskTier::Medium);
        assert_eq!(RiskTier::from_ratio(1.0), RiskTier::Medium);
        assert_eq!(RiskTier::from_ratio(1.10), RiskTier::Medium);
        assert_eq!(RiskTier::from_ratio(1.1001), RiskTier::High);
    }

    #[test]
    fn tier_bands() {
        assert_eq!(LateralityTier::from_mean(0.849), LateralityTier::T1);
        assert_eq!(LateralityTier::from_mean(0.85), LateralityTier::T2);
        assert_eq!(LateralityTier::from_mean(0.96), LateralityTier::T3);
        assert_eq!(LateralityTier::from_mean(0.99), LateralityTier::T4);
        assert_eq!(LateralityTier::from_mean(1.0), LateralityTier::T4);
    }

    #[test]
    fn context_ratio_examples() {
        let r = context_ratios_from_maps(0.292, 0.151, None, None).unwrap();
        assert!((r.bgfg - 0.517).abs() < 1e-3);
        assert_eq!(r.risk, RiskTier::Low);
        let r = context_ratios_from_maps(0.238, 0.278, Some(0.3), None).unwrap();
        assert!((r.bgfg - 1.168).abs() < 1e-3);
        assert_eq!(r.risk, RiskTier::High);
        assert!(r.bgsilfg.is_some() && r.silfg.is_none());
        let r = context_ratios_from_maps(0.4, 0.4, None, None).unwrap();
        assert_eq!(r.bgfg, 1.0);
        assert_eq!(r.risk, RiskTier::Medium);
        assert!(context_ratios_from_maps(0.0, 0.1, None, None).is_err());
    }

    #[test]
    fn mirrored_ratio_examples() {
        let r = mirrored_query_ratio_from_maps(0.295, 0.257).unwrap();
        assert!((r.ratio - 0.871).abs() < 1e-3);
        assert!(!r.mirror_preferred);
        let r = mirrored_query_ratio_from_maps(0.305, 0.306).unwrap();
        assert!((r.ratio - 1.003).abs() < 1e-3);
        assert!(r.mirror_preferred);
        assert!(mirrored_query_ratio_from_maps(0.0, 0.1).is_err());
    }

    fn two_identity_corpus() -> Corpus {
        Corpus::new(vec![
            ImageRecord::new("a_l", "A", Split::Test).with_flank(Flank::Left),
            ImageRecord::new("a_r", "A", Split::Test).with_flank(Flank::Right),
            ImageRecord::new("b_l", "B", Split::Test).with_flank(Flank::Left),
            ImageRecord::new("b_r", "B", Split::Test).with_flank(Flank::Right),
        ])
        .unwrap()
    }

    #[test]
    fn cross_flank_trivial() {
        let c = two_identity_corpus();
        let ids: Vec<String> = ["a_l", "a_r", "b_l", "b_r"].iter().map(|s| s.to_string()).collect();
        #[rustfmt::skip]
        let s = ScoreMatrix::new(ids.clone(), ids, vec![
            1.0, 0.8, 0.1, 0.0,
            0.8, 1.0, 0.0, 0.1,
            0.1, 0.0, 1.0, 0.7,
            0.0, 0.1, 0.7, 1.0,
        ], ScoreKind::External).unwrap();
        let r = cross_flank_eval(&s, &c).unwrap();
        assert_eq!(r.cross.map, 1.0);
        assert_eq!(r.cross.cmc[&1].micro, 1.0);
        // Within-flank galleries hold no same-identity image here.
        assert_eq!(r.within.n_queries, 0);
        assert_eq!(r.within.excluded_queries.len(), 4);
        assert_eq!(r.cross_within_ratio, None);
        assert!((r.same_id_cross_mean.unwrap() - 0.75).abs() < 1e-12);
        assert!((r.diff_id_cross_mean.unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn cross_flank_needs_both_sides() {
        let c = Corpus::new(vec![
            ImageRecord::new("a", "A", Split::Test).with_flank(Flank::Left),
            ImageRecord::new("b", "B", Split::Test).with_flank(Flank::Right),
        ])
        .unwrap();
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let s = ScoreMatrix::new(ids.clone(), ids, vec![1.0; 4], ScoreKind::External).unwrap();
        assert!(cross_flank_eval(&s, &c).is_err());
    }

    #[test]
    fn cross_flank_published_ratio() {
        assert!((cross_within_ratio(0.477, 0.716).unwrap() - 0.666).abs() < 1e-3);
        assert!(((0.47 - 0.04) - 0.43f64).abs() < 1e-12);
    }

    #[test]
    fn mirror_examples() {
        let c = two_identity_corpus();
        let mut selfs = BTreeMap::new();
        selfs.insert("a_l".to_string(), 0.719);
        let s = ScoreMatrix::new(
            vec!["a_l".into()],
            vec!["a_r".into(), "b_l".into(), "b_r".into()],
            vec![0.99, 0.792, 0.5],
            ScoreKind::External,
        )
        .unwrap();
        let r = mirror_diagnostics(&selfs, &s, &c).unwrap();
        let m = &r.per_image["a_l"];
        assert_eq!(m.nn_id, "b_l");
        assert!((m.danger_margin - 0.073).abs() < 1e-12);
        assert_eq!(r.positive_margin_ids, vec!["a_l".to_string()]);
        assert_eq!(r.tier, LateralityTier::T1);
        assert_eq!(r.mirror_sim_std, 0.0);
    }

    #[test]
    fn mirror_without_candidates() {
        let c = two_identity_corpus();
        let mut selfs = BTreeMap::new();
        selfs.insert("a_l".to_string(), 0.9);
        let s = ScoreMatrix::new(vec!["a_l".into()], vec!["a_r".into()], vec![0.5], ScoreKind::External).unwrap();
        assert!(mirror_diagnostics(&selfs, &s, &c).is_err());
    }

    #[test]
    fn rank_percentile_examples() {
        let g = vec![("x".to_string(), 0, 0.3), ("y".to_string(), 0, 0.8)];
        let r = mirror_rank_percentile(&g).unwrap();
        assert_eq!(r["x"].mean_pct, 0.0);
        assert_eq!(r["y"].mean_pct, 1.0);

        // Three models, three seeds; "b" and "c" swap in seed 2.
        let mut g = Vec::new();
        for seed in 0..3u64 {
            g.push(("a".to_string(), seed, 0.1));
            let (b, c) = if seed == 2 { (0.9, 0.5) } else { (0.5, 0.9) };
            g.push(("b".to_string(), seed, b));
            g.push(("c".to_string(), seed, c));
        }
        let r = mirror_rank_percentile(&g).unwrap();
        assert_eq!(r["a"].mean_pct, 0.0);
        assert_eq!(r["a"].std_pct, 0.0);
        // b: 0.5, 0.5, 1.0
        assert!((r["b"].mean_pct - 2.0 / 3.0).abs() < 1e-12);
        assert!((r["b"].std_pct - (2.0f64 / 36.0).sqrt()).abs() < 1e-12);

        g.pop();
        assert!(mirror_rank_percentile(&g).is_err());
    }

    #[test]
    fn rank_percentile_ties_average() {
        let g = vec![
            ("a".to_string(), 0, 0.5),
            ("b".to_string(), 0, 0.5),
            ("c".to_string(), 0, 0.9),
        ];
        let r = mirror_rank_percentile(&g).unwrap();
        assert_eq!(r["a"].mean_pct, 0.25);
        assert_eq!(r["b"].mean_pct, 0.25);
        assert_eq!(r["c"].mean_pct, 1.0);
    }
}
