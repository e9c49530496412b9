//! Query-gallery evaluation: per-query AP, identity-balanced (macro) and
//! instance-weighted (micro) mAP, and CMC@K.
//!
//! Each query ranks the gallery by descending score; ties go to the
//! lexicographically smaller gallery id. The query itself is never part of
//! its own gallery. Queries without a same-identity gallery item are
//! excluded and listed, not scored as zero.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::geometry::ScoreMatrix;
use crate::par::Execution;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub identity: String,
    pub ap: f64,
    /// 1-based rank of the first relevant gallery item.
    pub first_correct_rank: usize,
    pub n_positives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmcPoint {
    #[serde(rename = "macro")]
    pub macro_: f64,
    pub micro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_query: BTreeMap<String, QueryOutcome>,
    pub map_macro: f64,
    pub map_micro: f64,
    pub cmc: BTreeMap<usize, CmcPoint>,
    pub excluded_queries: Vec<String>,
}

impl EvalResult {
    pub fn per_query_ap(&self) -> BTreeMap<String, f64> {
        self.per_query.iter().map(|(id, q)| (id.clone(), q.ap)).collect()
    }

    pub fn n_queries(&self) -> usize {
        self.per_query.len()
    }

    /// CMC at any rank, recomputed from the stored first-correct ranks.
    pub fn cmc_at(&self, k: usize) -> CmcPoint {
        let hits = self
            .per_query
            .values()
            .map(|q| (q.identity.as_str(), (q.first_correct_rank <= k) as u8 as f64));
        CmcPoint {
            macro_: macro_mean(hits.clone()),
            micro: micro_mean(hits.map(|(_, x)| x)),
        }
    }

    /// `image_id,identity,ap,first_correct_rank`
    pub fn write_per_query_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "image_id,identity,ap,first_correct_rank")?;
        for (id, q) in &self.per_query {
            writeln!(w, "{id},{},{},{}", q.identity, q.ap, q.first_correct_rank)?;
        }
        Ok(())
    }
}

/// Mean over identities of the mean value within each identity.
fn macro_mean<'a>(values: impl Iterator<Item = (&'a str, f64)>) -> f64 {
    let mut groups: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (identity, v) in values {
        let e = groups.entry(identity).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    if groups.is_empty() {
        return 0.0;
    }
    groups.values().map(|(s, n)| s / *n as f64).sum::<f64>() / groups.len() as f64
}

fn micro_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Uninterpolated AP of a ranked relevance list; `None` when the list holds
/// no positive (the query is then excluded).
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Full-gallery evaluation of `scores` against identities from `corpus`.
pub fn evaluate(scores: &ScoreMatrix, corpus: &Corpus, ks: &[usize]) -> Result<EvalResult> {
    evaluate_with(Execution::default(), scores, corpus, ks)
}

pub fn evaluate_with(exec: Execution, scores: &ScoreMatrix, corpus: &Corpus, ks: &[usize]) -> Result<EvalResult> {
    let queries: Vec<usize> = (0..scores.n_queries()).collect();
    evaluate_subset(exec, scores, corpus, ks, &queries, |_, _| true)
}

/// Evaluates the queries at `query_rows`, each against the gallery columns
/// for which `allowed(query_row, gallery_col)` holds.
pub(crate) fn evaluate_subset<F>(
    exec: Execution,
    scores: &ScoreMatrix,
    corpus: &Corpus,
    ks: &[usize],
    query_rows: &[usize],
    allowed: F,
) -> Result<EvalResult>
where
    F: Fn(usize, usize) -> bool + Sync,
{
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("ks must be non-empty positive ranks"));
    }
    if scores.n_gallery() == 0 {
        return Err(Error::invalid("empty gallery"));
    }
    let q_ident: Vec<&str> = scores
        .queries
        .iter()
        .map(|id| corpus.identity_of(id))
        .collect::<Result<_>>()?;
    let g_ident: Vec<&str> = scores
        .gallery
        .iter()
        .map(|id| corpus.identity_of(id))
        .collect::<Result<_>>()?;

    let outcomes: Vec<Option<QueryOutcome>> = exec.map(query_rows.len(), |i| {
        let q = query_rows[i];
        let qid = &scores.queries[q];
        let row = scores.row(q);
        let mut order: Vec<usize> = (0..row.len())
            .filter(|&g| scores.gallery[g] != *qid && allowed(q, g))
            .collect();
        order.sort_unstable_by(|&a, &b| {
            row[b]
                .total_cmp(&row[a])
                .then_with(|| scores.gallery[a].cmp(&scores.gallery[b]))
        });
        let relevance: Vec<bool> = order.iter().map(|&g| g_ident[g] == q_ident[q]).collect();
        let ap = average_precision(&relevance)?;
        Some(QueryOutcome {
            identity: q_ident[q].to_string(),
            ap,
            first_correct_rank: relevance.iter().position(|&r| r).unwrap() + 1,
            n_positives: relevance.iter().filter(|&&r| r).count(),
        })
    });

    let mut per_query = BTreeMap::new();
    let mut excluded = Vec::new();
    for (&q, outcome) in query_rows.iter().zip(outcomes) {
        let id = scores.queries[q].clone();
        match outcome {
            Some(o) => {
                if per_query.insert(id.clone(), o).is_some() {
                    return Err(Error::Duplicate {
                        what: "query id",
                        key: id,
                    });
                }
            }
            None => excluded.push(id),
        }
    }
    excluded.sort();

    let mut result = EvalResult {
        map_macro: macro_mean(per_query.values().map(|q| (q.identity.as_str(), q.ap))),
        map_micro: micro_mean(per_query.values().map(|q| q.ap)),
        per_query,
        cmc: BTreeMap::new(),
        excluded_queries: excluded,
    };
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    for k in ks {
        let point = result.cmc_at(k);
        result.cmc.insert(k, point);
    }
    Ok(result)
}

/// Macro mAP recomputed from the per-query APs grouped by the corpus
/// identities. Equals `result.map_macro` for any result computed on `corpus`.
pub fn identity_rebalance_check(result: &EvalResult, corpus: &Corpus) -> Result<f64> {
    let pairs: Vec<(&str, f64)> = result
        .per_query
        .iter()
        .map(|(id, q)| corpus.identity_of(id).map(|ident| (ident, q.ap)))
        .collect::<Result<_>>()?;
    Ok(macro_mean(pairs.into_iter()))
}
