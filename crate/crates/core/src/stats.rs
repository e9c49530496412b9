//! Rank correlations with seeded bootstrap intervals, and the paired
//! significance pipeline: per-seed Wilcoxon signed-rank tests, Fisher
//! combination across seeds, Holm correction across endpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::par::Execution;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const MIN_BOOTSTRAP: usize = 1000;
/// Largest n for which Spearman p-values are computed by full permutation.
pub const SPEARMAN_EXACT_MAX_N: usize = 10;
/// Largest n for which the Wilcoxon null is enumerated exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 25;
pub const WILCOXON_MIN_N: usize = 5;

/// 1-based ranks, ties receive the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in correlation input"));
    }
    if is_constant(x) || is_constant(y) {
        return Err(Error::invalid("constant input list"));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spearman's rho without the p-value; inputs must not be constant.
fn spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    let rx = centered(&average_ranks(x));
    let ry = centered(&average_ranks(y));
    (dot(&rx, &ry) / (dot(&rx, &rx) * dot(&ry, &ry)).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rho and its two-sided p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    check_pair(x, y)?;
    let rho = spearman_rho(x, y);
    let n = x.len();
    let p = if n <= SPEARMAN_EXACT_MAX_N {
        spearman_exact_p(x, y)
    } else if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok((rho, p))
}

/// Fraction of all n! pairings whose |rho| reaches the observed one.
fn spearman_exact_p(x: &[f64], y: &[f64]) -> f64 {
    let rx = centered(&average_ranks(x));
    let mut ry = centered(&average_ranks(y));
    let observed = dot(&rx, &ry).abs();
    let tol = 1e-9 * (1.0 + observed);
    let n = ry.len();
    // Heap's algorithm over the y ranks.
    let mut c = vec![0usize; n];
    let (mut hits, mut total) = (0u64, 0u64);
    let mut visit = |ry: &[f64]| {
        total += 1;
        if dot(&rx, ry).abs() >= observed - tol {
            hits += 1;
        }
    };
    visit(&ry);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                ry.swap(0, i);
            } else {
                ry.swap(c[i], i);
            }
            visit(&ry);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

/// Tie-corrected S statistic, denominators and tie sums for tau-b.
struct KendallParts {
    s: f64,
    n0: f64,
    n1: f64,
    n2: f64,
}

fn kendall_parts(x: &[f64], y: &[f64]) -> KendallParts {
    let n = x.len();
    let mut s = 0i64;
    let (mut tx, mut ty) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).partial_cmp(&0.0).unwrap() as i64;
            let b = (y[i] - y[j]).partial_cmp(&0.0).unwrap() as i64;
            s += a * b;
            tx += (a == 0) as i64;
            ty += (b == 0) as i64;
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    KendallParts {
        s: s as f64,
        n0,
        n1: tx as f64,
        n2: ty as f64,
    }
}

fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    let k = kendall_parts(x, y);
    (k.s / ((k.n0 - k.n1) * (k.n0 - k.n2)).sqrt()).clamp(-1.0, 1.0)
}

fn tie_sizes(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let mut j = i + 1;
        while j < s.len() && s[j] == s[i] {
            j += 1;
        }
        if j - i > 1 {
            out.push((j - i) as f64);
        }
        i = j;
    }
    out
}

/// Kendall's tau-b with a normal-approximation two-sided p-value using the
/// tie-corrected variance of S.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    check_pair(x, y)?;
    let tau = kendall_tau(x, y);
    let s = kendall_parts(x, y).s;
    let n = x.len() as f64;
    let (tx, ty) = (tie_sizes(x), tie_sizes(y));
    let sum = |t: &[f64], f: &dyn Fn(f64) -> f64| t.iter().map(|&t| f(t)).sum::<f64>();
    let v0 = n * (n - 1.0) * (2.0 * n + 5.0);
    let vt = sum(&tx, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let vu = sum(&ty, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let v1 = sum(&tx, &|t| t * (t - 1.0)) * sum(&ty, &|t| t * (t - 1.0)) / (2.0 * n * (n - 1.0));
    let v2 = sum(&tx, &|t| t * (t - 1.0) * (t - 2.0)) * sum(&ty, &|t| t * (t - 1.0) * (t - 2.0))
        / (9.0 * n * (n - 1.0) * (n - 2.0));
    let var = (v0 - vt - vu) / 18.0 + v1 + v2;
    let z = s / var.sqrt();
    Ok((tau, two_sided_normal(z)))
}

fn two_sided_normal(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * n.sf(z.abs())).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Spearman,
    Kendall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    pub b: usize,
    /// Resamples dropped because a resampled column was constant.
    pub skipped: usize,
    pub seed: u64,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Row indices for bootstrap resample `index`: ChaCha8 keyed by `seed` on
/// stream `index`, so each resample is reproducible on its own.
pub fn resample_indices(n: usize, seed: u64, index: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

pub fn bootstrap_ci(x: &[f64], y: &[f64], stat: Statistic, b: usize, seed: u64) -> Result<BootstrapCi> {
    bootstrap_ci_with(Execution::default(), x, y, stat, b, seed)
}

/// Percentile (2.5%, 97.5%) interval over `b` paired resamples.
pub fn bootstrap_ci_with(
    exec: Execution,
    x: &[f64],
    y: &[f64],
    stat: Statistic,
    b: usize,
    seed: u64,
) -> Result<BootstrapCi> {
    check_pair(x, y)?;
    if b < MIN_BOOTSTRAP {
        return Err(Error::invalid(format!(
            "need at least {MIN_BOOTSTRAP} resamples, got {b}"
        )));
    }
    let n = x.len();
    let draws: Vec<Option<f64>> = exec.map(b, |i| {
        let idx = resample_indices(n, seed, i as u64);
        let xs: Vec<f64> = idx.iter().map(|&k| x[k]).collect();
        let ys: Vec<f64> = idx.iter().map(|&k| y[k]).collect();
        if is_constant(&xs) || is_constant(&ys) {
            return None;
        }
        Some(match stat {
            Statistic::Spearman => spearman_rho(&xs, &ys),
            Statistic::Kendall => kendall_tau(&xs, &ys),
        })
    });
    let mut kept: Vec<f64> = draws.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::invalid("every bootstrap resample was degenerate"));
    }
    kept.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        lo: percentile_sorted(&kept, 0.025),
        hi: percentile_sorted(&kept, 0.975),
        b,
        skipped: b - kept.len(),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub spearman_rho: f64,
    pub spearman_p: f64,
    pub kendall_tau: f64,
    pub kendall_p: f64,
    pub ci_rho: (f64, f64),
    pub ci_tau: (f64, f64),
    pub n: usize,
    pub b: usize,
    pub seed: u64,
    pub skipped_rho: usize,
    pub skipped_tau: usize,
}

pub fn correlate(exec: Execution, x: &[f64], y: &[f64], b: usize, seed: u64) -> Result<CorrelationResult> {
    let (spearman_rho, spearman_p) = spearman(x, y)?;
    let (kendall_tau, kendall_p) = kendall(x, y)?;
    let r = bootstrap_ci_with(exec, x, y, Statistic::Spearman, b, seed)?;
    let t = bootstrap_ci_with(exec, x, y, Statistic::Kendall, b, seed)?;
    Ok(CorrelationResult {
        spearman_rho,
        spearman_p,
        kendall_tau,
        kendall_p,
        ci_rho: (r.lo, r.hi),
        ci_tau: (t.lo, t.hi),
        n: x.len(),
        b,
        seed,
        skipped_rho: r.skipped,
        skipped_tau: t.skipped,
    })
}

/// Two-sided Wilcoxon signed-rank p-value for paired differences.
///
/// Zero differences are dropped. With at most 25 non-zero differences the
/// null distribution is enumerated exactly (tied magnitudes keep their
/// average ranks); above that a normal approximation with tie and
/// continuity correction is used.
pub fn wilcoxon_signed_rank(d: &[f64]) -> Result<f64> {
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite difference"));
    }
    let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::DegeneratePairing(format!(
            "all {} differences are zero",
            d.len()
        )));
    }
    if nz.len() < WILCOXON_MIN_N {
        return Err(Error::invalid(format!(
            "{} non-zero differences, need at least {WILCOXON_MIN_N}",
            nz.len()
        )));
    }
    let mags: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&mags);
    let n = nz.len();
    if n <= WILCOXON_EXACT_MAX_N {
        // Doubled average ranks are integers.
        let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let w2: usize = nz.iter().zip(&r2).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let total: usize = r2.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &r2 {
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
        Ok((2.0 * lower.min(upper)).min(1.0))
    } else {
        let nf = n as f64;
        let w: f64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let mean = nf * (nf + 1.0) / 4.0;
        let ties: f64 = tie_sizes(&mags).iter().map(|t| t * t * t - t).sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        Ok(two_sided_normal(z))
    }
}

/// Fisher's method: `-2 sum ln p` against chi-square with `2k` degrees of
/// freedom.
pub fn fisher_combine(ps: &[f64]) -> Result<(f64, f64)> {
    if ps.is_empty() {
        return Err(Error::invalid("no p-values to combine"));
    }
    if let Some(p) = ps.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::invalid(format!("p-value {p} outside (0, 1]")));
    }
    let stat = -2.0 * ps.iter().map(|p| p.ln()).sum::<f64>();
    Ok((stat, chi2_sf_even(stat, ps.len())))
}

/// Survival function of chi-square with `2k` degrees of freedom.
fn chi2_sf_even(x: f64, k: usize) -> f64 {
    let h = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..k {
        term *= h / i as f64;
        sum += term;
    }
    ((-h).exp() * sum).min(1.0)
}

/// Holm step-down adjusted p-values, in input order.
pub fn holm_adjust(ps: &[f64]) -> Vec<f64> {
    let m = ps.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| ps[a].total_cmp(&ps[b]));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (j, &i) in order.iter().enumerate() {
        running = running.max(((m - j) as f64 * ps[i]).min(1.0));
        out[i] = running;
    }
    out
}

/// `(model, seed, endpoint)`
pub type MetricKey = (String, u64, String);
/// Per-query values keyed by image id, for every `(model, seed, endpoint)`.
pub type PerQueryMetrics = BTreeMap<MetricKey, BTreeMap<String, f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub model_a: String,
    pub model_b: String,
    pub endpoint: String,
    pub seeds: Vec<u64>,
    pub per_seed_p: Vec<f64>,
    pub fisher_stat: f64,
    pub fisher_p: f64,
    pub holm_adjusted_p: f64,
    pub supported: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedTest {
    pub model_a: String,
    pub model_b: String,
    /// `None` when the whole pair is rejected.
    pub endpoint: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub alpha: f64,
    pub results: Vec<PairedTestResult>,
    pub rejected: Vec<RejectedTest>,
}

impl PairedReport {
    /// `pair,endpoint,seed_p,fisher_p,holm_p,supported`; seed p-values are
    /// `;`-separated in seed order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "pair,endpoint,seed_p,fisher_p,holm_p,supported")?;
        for r in &self.results {
            let seed_p: Vec<String> = r.per_seed_p.iter().map(|p| format!("{p:.6e}")).collect();
            writeln!(
                w,
                "{}|{},{},{},{:.6e},{:.6e},{}",
                r.model_a,
                r.model_b,
                r.endpoint,
                seed_p.join(";"),
                r.fisher_p,
                r.holm_adjusted_p,
                r.supported
            )?;
        }
        Ok(())
    }
}

/// Runs the paired pipeline for every `(model_a, model_b)` pair. Pairs with
/// incomplete seeds, and endpoints whose differences are degenerate, are
/// listed under `rejected`; Holm runs over the remaining endpoints of a pair.
pub fn paired_pipeline(metrics: &PerQueryMetrics, pairs: &[(String, String)], alpha: f64) -> Result<PairedReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let mut report = PairedReport {
        alpha,
        ..Default::default()
    };
    for (a, b) in pairs {
        let reject = |endpoint: Option<String>, e: &Error| RejectedTest {
            model_a: a.clone(),
            model_b: b.clone(),
            endpoint,
            reason: e.to_string(),
        };
        let (seeds, endpoints) = match complete_cells(metrics, a, b) {
            Ok(v) => v,
            Err(e) => {
                report.rejected.push(reject(None, &e));
                continue;
            }
        };
        let mut family = Vec::new();
        for endpoint in &endpoints {
            match endpoint_test(metrics, a, b, &seeds, endpoint) {
                Ok((per_seed_p, stat, p)) => family.push((endpoint.clone(), per_seed_p, stat, p)),
                Err(e) => report.rejected.push(reject(Some(endpoint.clone()), &e)),
            }
        }
        let fisher: Vec<f64> = family.iter().map(|f| f.3).collect();
        for ((endpoint, per_seed_p, fisher_stat, fisher_p), holm) in family.into_iter().zip(holm_adjust(&fisher)) {
            report.results.push(PairedTestResult {
                model_a: a.clone(),
                model_b: b.clone(),
                endpoint,
                seeds: seeds.clone(),
                per_seed_p,
                fisher_stat,
                fisher_p,
                holm_adjusted_p: holm,
                supported: holm < alpha,
            });
        }
    }
    Ok(report)
}

/// Seeds and endpoints of a pair, provided every cell is present for both
/// models.
fn complete_cells(metrics: &PerQueryMetrics, a: &str, b: &str) -> Result<(Vec<u64>, Vec<String>)> {
    let pair = format!("{a}|{b}");
    let mut seeds = BTreeSet::new();
    let mut endpoints = BTreeSet::new();
    for (m, s, e) in metrics.keys() {
        if m == a || m == b {
            seeds.insert(*s);
            endpoints.insert(e.clone());
        }
    }
    if seeds.is_empty() {
        return Err(Error::IncompleteSeeds {
            pair,
            detail: "no metrics for either model".into(),
        });
    }
    let mut missing = Vec::new();
    for m in [a, b] {
        for &s in &seeds {
            for e in &endpoints {
                if !metrics.contains_key(&(m.to_string(), s, e.clone())) {
                    missing.push(format!("{m}/seed {s}/{e}"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteSeeds {
            pair,
            detail: format!("missing {}", missing.join(", ")),
        });
    }
    Ok((seeds.into_iter().collect(), endpoints.into_iter().collect()))
}

fn endpoint_test(
    metrics: &PerQueryMetrics,
    a: &str,
    b: &str,
    seeds: &[u64],
    endpoint: &str,
) -> Result<(Vec<f64>, f64, f64)> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let va = &metrics[&(a.to_string(), s, endpoint.to_string())];
        let vb = &metrics[&(b.to_string(), s, endpoint.to_string())];
        if !va.keys().eq(vb.keys()) {
            return Err(Error::invalid(format!(
                "seed {s}: per-query values of {a} and {b} cover different images"
            )));
        }
        let d: Vec<f64> = va.values().zip(vb.values()).map(|(x, y)| x - y).collect();
        per_seed.push(wilcoxon_signed_rank(&d)?);
    }
    let (stat, p) = fisher_combine(&per_seed)?;
    Ok((per_seed, stat, p))
}
