//! Validation coreset selection under the facility-location objective
//! `F(S) = sum_v max_{s in S} sim(v, s)`.
//!
//! Phases: a per-identity floor chosen greedily inside each identity, a
//! lazy-greedy global fill up to the coverage target, within-identity swaps
//! that trade non-boundary picks for unselected boundary images, and a final
//! greedy top-up when the swaps left coverage below target.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{l2_normalize, Corpus, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::geometry::dot_block;
use crate::par::Execution;
use crate::stats::percentile_sorted;

/// Dense symmetric `n x n` similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    n: usize,
    data: Vec<f64>,
}

impl Similarity {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::invalid(format!(
                "{} entries for a {n} x {n} similarity",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite similarity"));
        }
        Ok(Similarity { n, data })
    }

    /// Cosine similarities of the l2-normalised rows, diagonal pinned to 1.
    pub fn cosine(exec: Execution, m: &EmbeddingMatrix) -> Result<Self> {
        let m = l2_normalize(m)?;
        let n = m.len();
        let raw = dot_block(m.data(), n, m.data(), n, m.dim(), exec);
        let mut data: Vec<f64> = raw.into_iter().map(f64::from).collect();
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Similarity::new(n, data)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

pub fn facility_location_value(selected: &[usize], sim: &Similarity) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::invalid("facility location of the empty set"));
    }
    if let Some(&bad) = selected.iter().find(|&&s| s >= sim.len()) {
        return Err(Error::invalid(format!("index {bad} out of range")));
    }
    Ok((0..sim.len())
        .map(|v| {
            selected
                .iter()
                .map(|&s| sim.get(v, s))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoresetConfig {
    pub target_coverage: f64,
    /// Percentile (0-100) of max cross-identity similarity above which an
    /// image counts as a boundary image.
    pub boundary_percentile: f64,
    pub swap_tolerance: f64,
    pub floor_min: usize,
    pub floor_fraction: f64,
    pub seed: u64,
}

impl Default for CoresetConfig {
    fn default() -> Self {
        CoresetConfig {
            target_coverage: 0.95,
            boundary_percentile: 75.0,
            swap_tolerance: 0.005,
            floor_min: 3,
            floor_fraction: 0.15,
            seed: 0,
        }
    }
}

impl CoresetConfig {
    /// `min(|V_i|, max(floor_min, ceil(floor_fraction * |V_i|)))`
    pub fn floor(&self, identity_size: usize) -> usize {
        let frac = (self.floor_fraction * identity_size as f64).ceil() as usize;
        self.floor_min.max(frac).min(identity_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetSelection {
    /// Sorted image ids.
    pub selected: Vec<String>,
    pub coverage_ratio: f64,
    pub boundary_fraction: f64,
    pub per_identity_counts: BTreeMap<String, usize>,
    pub boundary_threshold: f64,
    pub n_floor: usize,
    pub n_fill: usize,
    pub n_swaps: usize,
    /// Coverage after each phase.
    pub coverage_after_floor: f64,
    pub coverage_after_fill: f64,
    pub coverage_after_swaps: f64,
    /// Marginal gain of every Phase-2 pick, in pick order.
    pub fill_gains: Vec<f64>,
    /// Images added after the swaps to restore the target.
    pub n_topup: usize,
}

impl CoresetSelection {
    /// One image id per line.
    pub fn id_list(&self) -> String {
        let mut s = self.selected.join("\n");
        s.push('\n');
        s
    }
}

/// Builds the coreset over the images of `embeddings`, with identities
/// taken from `corpus`.
pub fn build_coreset(
    exec: Execution,
    corpus: &Corpus,
    embeddings: &EmbeddingMatrix,
    cfg: &CoresetConfig,
) -> Result<CoresetSelection> {
    let identities: Vec<String> = embeddings
        .ids()
        .iter()
        .map(|id| corpus.identity_of(id).map(str::to_string))
        .collect::<Result<_>>()?;
    let sim = Similarity::cosine(exec, embeddings)?;
    build_coreset_from_similarity(exec, embeddings.ids(), &identities, &sim, cfg)
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    gain: f64,
    priority: usize,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.priority.cmp(&self.priority))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn gain(sim: &Similarity, best: &[f64], c: usize, scope: &[usize]) -> f64 {
    scope.iter().map(|&v| (sim.get(v, c) - best[v]).max(0.0)).sum()
}

pub fn build_coreset_from_similarity(
    exec: Execution,
    ids: &[String],
    identities: &[String],
    sim: &Similarity,
    cfg: &CoresetConfig,
) -> Result<CoresetSelection> {
    let n = sim.len();
    if n == 0 || ids.len() != n || identities.len() != n {
        return Err(Error::invalid(
            "coreset needs matching, non-empty ids, identities and similarity",
        ));
    }
    if !(cfg.target_coverage > 0.0 && cfg.target_coverage <= 1.0) {
        return Err(Error::invalid(format!(
            "target coverage {} outside (0, 1]",
            cfg.target_coverage
        )));
    }
    if !(0.0..=100.0).contains(&cfg.boundary_percentile) {
        return Err(Error::invalid("boundary percentile outside [0, 100]"));
    }

    // Seeded tie-break priorities; lower wins.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut priority = vec![0usize; n];
    for (rank, &i) in perm.iter().enumerate() {
        priority[i] = rank;
    }

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ident) in identities.iter().enumerate() {
        groups.entry(ident.as_str()).or_default().push(i);
    }
    let total: f64 = (0..n)
        .map(|v| sim.row(v).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    if !(total > 0.0) {
        return Err(Error::invalid("facility location of the full set is not positive"));
    }
    let baseline = sim.data.iter().copied().fold(f64::INFINITY, f64::min);
    let mut selected = vec![false; n];

    // Phase 1: per-identity floors, greedy within the identity.
    for members in groups.values() {
        let mut local = vec![baseline; n];
        for _ in 0..cfg.floor(members.len()) {
            let pick = members
                .iter()
                .filter(|&&c| !selected[c])
                .map(|&c| (gain(sim, &local, c, members), c))
                .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| priority[b.1].cmp(&priority[a.1])))
                .map(|(_, c)| c)
                .expect("floor never exceeds identity size");
            selected[pick] = true;
            for &v in members {
                local[v] = local[v].max(sim.get(v, pick));
            }
        }
    }
    let n_floor = selected.iter().filter(|&&s| s).count();
    let mut best = vec![baseline; n];
    for s in (0..n).filter(|&s| selected[s]) {
        for v in 0..n {
            best[v] = best[v].max(sim.get(v, s));
        }
    }
    let coverage = |best: &[f64]| best.iter().sum::<f64>() / total;
    let coverage_after_floor = coverage(&best);

    // Phase 2: lazy greedy fill.
    let fill_gains = greedy_fill(
        exec,
        sim,
        &mut best,
        &mut selected,
        &priority,
        total,
        cfg.target_coverage,
    );
    let coverage_after_fill = coverage(&best);

    // Phase 3: boundary enrichment.
    let max_cross: Vec<f64> = exec.map(n, |v| {
        (0..n)
            .filter(|&u| identities[u] != identities[v])
            .map(|u| sim.get(v, u))
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let mut finite: Vec<f64> = max_cross.iter().copied().filter(|x| x.is_finite()).collect();
    finite.sort_by(f64::total_cmp);
    let boundary_threshold = if finite.is_empty() {
        f64::INFINITY
    } else {
        percentile_sorted(&finite, cfg.boundary_percentile / 100.0)
    };
    let boundary: Vec<bool> = max_cross.iter().map(|&b| b > boundary_threshold).collect();
    let floor_target = cfg.target_coverage - cfg.swap_tolerance;
    let mut n_swaps = 0;
    let mut top2 = TopTwo::new(sim, &selected);
    for members in groups.values() {
        let mut incoming: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&c| boundary[c] && !selected[c])
            .collect();
        incoming.sort_by(|&a, &b| {
            max_cross[b]
                .total_cmp(&max_cross[a])
                .then_with(|| priority[a].cmp(&priority[b]))
        });
        for c in incoming {
            let outgoing: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&r| selected[r] && !boundary[r])
                .collect();
            if outgoing.is_empty() {
                break;
            }
            let scored = exec.map(outgoing.len(), |k| {
                let r = outgoing[k];
                let f: f64 = (0..n).map(|v| top2.without(v, r).max(sim.get(v, c))).sum();
                (f / total, r)
            });
            let Some((cov, r)) = scored
                .into_iter()
                .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| priority[b.1].cmp(&priority[a.1])))
            else {
                continue;
            };
            if cov >= floor_target {
                selected[r] = false;
                selected[c] = true;
                n_swaps += 1;
                top2 = TopTwo::new(sim, &selected);
            }
        }
    }

    // Phase 4: swaps may leave coverage just under target; top it back up.
    let mut best = vec![baseline; n];
    for s in (0..n).filter(|&s| selected[s]) {
        for v in 0..n {
            best[v] = best[v].max(sim.get(v, s));
        }
    }
    let coverage_after_swaps = coverage(&best);
    let topup_gains = greedy_fill(
        exec,
        sim,
        &mut best,
        &mut selected,
        &priority,
        total,
        cfg.target_coverage,
    );

    let chosen: Vec<usize> = (0..n).filter(|&i| selected[i]).collect();
    let coverage_ratio = facility_location_value(&chosen, sim)? / total;
    let mut per_identity_counts: BTreeMap<String, usize> = groups.keys().map(|k| (k.to_string(), 0)).collect();
    for &i in &chosen {
        *per_identity_counts.get_mut(identities[i].as_str()).unwrap() += 1;
    }
    let mut selected_ids: Vec<String> = chosen.iter().map(|&i| ids[i].clone()).collect();
    selected_ids.sort();
    Ok(CoresetSelection {
        boundary_fraction: chosen.iter().filter(|&&i| boundary[i]).count() as f64 / chosen.len() as f64,
        selected: selected_ids,
        coverage_ratio,
        per_identity_counts,
        boundary_threshold,
        n_floor,
        n_fill: fill_gains.len(),
        n_swaps,
        coverage_after_floor,
        coverage_after_fill,
        coverage_after_swaps,
        fill_gains,
        n_topup: topup_gains.len(),
    })
}

/// Lazy-greedy additions until `best` covers `target` of `total`; returns
/// the marginal gain of each pick.
fn greedy_fill(
    exec: Execution,
    sim: &Similarity,
    best: &mut [f64],
    selected: &mut [bool],
    priority: &[usize],
    total: f64,
    target: f64,
) -> Vec<f64> {
    let n = sim.len();
    let all: Vec<usize> = (0..n).collect();
    let coverage = |best: &[f64]| best.iter().sum::<f64>() / total;
    let mut gains = Vec::new();
    if coverage(best) >= target {
        return gains;
    }
    let open: Vec<usize> = (0..n).filter(|&c| !selected[c]).collect();
    let initial = exec.map(open.len(), |k| gain(sim, best, open[k], &all));
    let mut heap: BinaryHeap<Candidate> = open
        .iter()
        .zip(initial)
        .map(|(&index, gain)| Candidate {
            gain,
            priority: priority[index],
            index,
        })
        .collect();
    while coverage(best) < target {
        let Some(top) = heap.pop() else { break };
        let fresh = Candidate {
            gain: gain(sim, best, top.index, &all),
            ..top
        };
        if heap.peek().is_some_and(|next| fresh < *next) {
            heap.push(fresh);
            continue;
        }
        if let Some(&last) = gains.last() {
            debug_assert!(fresh.gain <= last + 1e-9 * (1.0 + last), "greedy gain increased");
        }
        gains.push(fresh.gain);
        selected[fresh.index] = true;
        for v in 0..n {
            best[v] = best[v].max(sim.get(v, fresh.index));
        }
    }
    gains
}

/// Best and second-best selected similarity for every image, so that the
/// coverage without one selected item is an O(1) lookup.
struct TopTwo {
    first: Vec<f64>,
    arg: Vec<usize>,
    second: Vec<f64>,
}

impl TopTwo {
    fn new(sim: &Similarity, selected: &[bool]) -> Self {
        let n = sim.len();
        let mut t = TopTwo {
            first: vec![f64::NEG_INFINITY; n],
            arg: vec![usize::MAX; n],
            second: vec![f64::NEG_INFINITY; n],
        };
        let chosen: Vec<usize> = (0..n).filter(|&s| selected[s]).collect();
        for v in 0..n {
            let row = sim.row(v);
            for &s in &chosen {
                let x = row[s];
                if x > t.first[v] {
                    t.second[v] = t.first[v];
                    t.first[v] = x;
                    t.arg[v] = s;
                } else if x > t.second[v] {
                    t.second[v] = x;
                }
            }
        }
        t
    }

    fn without(&self, v: usize, removed: usize) -> f64 {
        if self.arg[v] == removed {
            self.second[v]
        } else {
            self.first[v]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_toy() -> (Vec<String>, Vec<String>, Similarity) {
        let n = 8;
        let ids: Vec<String> = (0..n).map(|i| format!("img{i}")).collect();
        let identities: Vec<String> = (0..n).map(|i| if i < 4 { "A" } else { "B" }.to_string()).collect();
        let data = (0..n * n)
            .map(|k| if (k / n < 4) == (k % n < 4) { 1.0 } else { 0.0 })
            .collect();
        (ids, identities, Similarity::new(n, data).unwrap())
    }

    #[test]
    fn facility_location_examples() {
        let (_, _, sim) = block_toy();
        let all: Vec<usize> = (0..8).collect();
        assert_eq!(facility_location_value(&all, &sim).unwrap(), 8.0);
        assert_eq!(facility_location_value(&[0, 4], &sim).unwrap(), 8.0);
        assert_eq!(
            facility_location_value(&[2], &sim).unwrap(),
            sim.row(2).iter().sum::<f64>()
        );
        assert!(facility_location_value(&[], &sim).is_err());
    }

    #[test]
    fn block_toy_floors_only() {
        let (ids, identities, sim) = block_toy();
        let s = build_coreset_from_similarity(
            Execution::Sequential,
            &ids,
            &identities,
            &sim,
            &CoresetConfig::default(),
        )
        .unwrap();
        assert_eq!(s.selected.len(), 6);
        assert_eq!(s.coverage_ratio, 1.0);
        assert_eq!(s.n_fill, 0);
        assert_eq!(s.n_swaps, 0);
        assert_eq!(s.per_identity_counts["A"], 3);
        assert_eq!(s.per_identity_counts["B"], 3);
    }

    #[test]
    fn full_target_reaches_full_value() {
        let n = 10;
        let ids: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        let identities: Vec<String> = (0..n).map(|i| format!("id{}", i % 2)).collect();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = if i == j {
                    1.0
                } else {
                    ((i * 7 + j * 7) % 11) as f64 / 20.0
                };
            }
        }
        let sim = Similarity::new(n, data).unwrap();
        let cfg = CoresetConfig {
            target_coverage: 1.0,
            ..Default::default()
        };
        let s = build_coreset_from_similarity(Execution::Sequential, &ids, &identities, &sim, &cfg).unwrap();
        assert!(s.coverage_ratio >= 1.0 - 1e-12);
        assert!(s.fill_gains.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn floor_rule() {
        let cfg = CoresetConfig::default();
        assert_eq!(cfg.floor(2), 2);
        assert_eq!(cfg.floor(4), 3);
        assert_eq!(cfg.floor(20), 3);
        assert_eq!(cfg.floor(21), 4);
        assert_eq!(cfg.floor(100), 15);
    }

    #[test]
    fn rejects_bad_target() {
        let (ids, identities, sim) = block_toy();
        for t in [0.0, 1.5] {
            let cfg = CoresetConfig {
                target_coverage: t,
                ..Default::default()
            };
            assert!(build_coreset_from_similarity(Execution::Sequential, &ids, &identities, &sim, &cfg).is_err());
        }
    }
}
