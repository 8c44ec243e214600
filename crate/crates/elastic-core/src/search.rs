//! Bi-objective evolutionary search over submodel genomes.
//!
//! Standard NSGA-II machinery (non-dominated sorting, crowding distance,
//! binary-tournament mating) with three customizations: the population is
//! seeded from the two boundary genomes, survivor selection runs
//! independently inside equal slices of the normalized-cost axis with a
//! minimum cost gap between survivors, and every genome ever evaluated is
//! memoized into an archive whose non-dominated front can only grow
//! stronger over generations.
//!
//! Objectives are `(loss, macs_norm)`, both minimized. Fitness is the
//! cross-entropy of the decoded submodel on one fixed batch, so it is a
//! pure function of the genome and can be cached.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::backbone::cost::{macs, macs_norm};
use crate::backbone::forward::{forward_plain, NoProbe};
use crate::backbone::{BackboneSpec, ElasticParams};
use crate::codec::ConfigCodec;
use crate::data::TokenDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Chacha};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSettings {
    pub population: usize,
    pub crossover_p: f64,
    /// Expected bit flips per offspring; the per-bit rate is this divided
    /// by the genome length.
    pub mutation_p: f64,
    pub generations: usize,
    /// Number of equal slices of the normalized-cost axis used by survivor
    /// selection.
    pub partitions: usize,
    /// Minimum normalized-cost difference between survivors in a slice.
    pub min_gap: f64,
    /// Fitness batch size (clamped to the dataset).
    pub eval_batch: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            population: 100,
            crossover_p: 0.95,
            mutation_p: 0.3,
            generations: 300,
            partitions: 20,
            min_gap: 0.005,
            eval_batch: 1024,
        }
    }
}

impl SearchSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.crossover_p) || self.mutation_p < 0.0 {
            return Err(Error::Config(
                "crossover/mutation probabilities out of range".into(),
            ));
        }
        if self.partitions == 0 {
            return Err(Error::Config("partitions must be at least 1".into()));
        }
        if self.population < 2 {
            return Err(Error::Config("population must be at least 2".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        if self.min_gap < 0.0 {
            return Err(Error::Config("min_gap must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub bits: Vec<bool>,
    pub loss: f64,
    pub macs_norm: f64,
    pub front_rank: usize,
    pub crowding: f64,
}

/// `a` dominates `b` under minimization of both objectives.
fn dominates(a: &Individual, b: &Individual) -> bool {
    a.loss <= b.loss
        && a.macs_norm <= b.macs_norm
        && (a.loss < b.loss || a.macs_norm < b.macs_norm)
}

/// Rank the population into non-dominated fronts (front 0 first) and stamp
/// `front_rank` on every individual. Returns the member indices per front.
pub fn fast_nondominated_sort(pop: &mut [Individual]) -> Vec<Vec<usize>> {
    let n = pop.len();
    let mut dominated_by: Vec<Vec<usize>> = alloc::vec![Vec::new(); n];
    let mut n_dominating = alloc::vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(&pop[i], &pop[j]) {
                dominated_by[i].push(j);
                n_dominating[j] += 1;
            } else if dominates(&pop[j], &pop[i]) {
                dominated_by[j].push(i);
                n_dominating[i] += 1;
            }
        }
    }
    let mut fronts: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| n_dominating[i] == 0).collect();
    let mut rank = 0;
    while !current.is_empty() {
        for &i in &current {
            pop[i].front_rank = rank;
        }
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by[i] {
                n_dominating[j] -= 1;
                if n_dominating[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(core::mem::take(&mut current));
        current = next;
        rank += 1;
    }
    fronts
}

/// Crowding distance of each point within one front, objectives given as
/// `(loss, macs_norm)` tuples. Boundary points on either objective get
/// `+∞`; a zero-range objective contributes nothing.
pub fn crowding_distance(points: &[(f64, f64)]) -> Vec<f64> {
    let n = points.len();
    if n <= 2 {
        return alloc::vec![f64::INFINITY; n];
    }
    let mut dist = alloc::vec![0.0f64; n];
    for obj in 0..2 {
        let val = |i: usize| if obj == 0 { points[i].0 } else { points[i].1 };
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| val(a).total_cmp(&val(b)).then(a.cmp(&b)));
        let lo = val(order[0]);
        let hi = val(order[n - 1]);
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if hi > lo {
            for w in 1..n - 1 {
                let i = order[w];
                if dist[i].is_finite() {
                    dist[i] += (val(order[w + 1]) - val(order[w - 1])) / (hi - lo);
                }
            }
        }
    }
    dist
}

/// Deterministic preference order: better front first, then more crowding,
/// then lower loss, then lower cost.
fn preferred(a: &Individual, b: &Individual) -> core::cmp::Ordering {
    a.front_rank
        .cmp(&b.front_rank)
        .then(b.crowding.total_cmp(&a.crowding))
        .then(a.loss.total_cmp(&b.loss))
        .then(a.macs_norm.total_cmp(&b.macs_norm))
}

fn interval_of(macs_norm: f64, partitions: usize) -> usize {
    let raw = (macs_norm.clamp(0.0, 1.0) * partitions as f64) as usize;
    raw.min(partitions - 1)
}

/// Survivor selection: slice the normalized-cost axis into equal intervals,
/// give each interval an even share of the population (remainder to the
/// intervals holding the lowest losses), then fill each interval greedily
/// by `(front_rank, crowding)` with crowding recomputed jointly over the
/// interval's remaining candidates and its already-chosen survivors. A
/// candidate closer than `min_gap` to a chosen survivor is passed over
/// while gap-respecting alternatives remain; once none remain, the quota is
/// filled with the best of the rejected. Unused quota moves to intervals
/// that still have candidates.
pub fn partitioned_select(
    candidates: &[Individual],
    settings: &SearchSettings,
) -> Result<Vec<Individual>> {
    if candidates.is_empty() {
        return Err(Error::Search("no candidates to select from".into()));
    }
    let p = settings.partitions;
    let mut buckets: Vec<Vec<usize>> = alloc::vec![Vec::new(); p];
    for (i, c) in candidates.iter().enumerate() {
        buckets[interval_of(c.macs_norm, p)].push(i);
    }

    // Even quotas, remainder to the intervals with the best losses.
    let base = settings.population / p;
    let remainder = settings.population % p;
    let mut quota = alloc::vec![base; p];
    let mut by_best_loss: Vec<usize> = (0..p).filter(|&b| !buckets[b].is_empty()).collect();
    by_best_loss.sort_by(|&a, &b| {
        let best = |bucket: &[usize]| {
            bucket
                .iter()
                .map(|&i| candidates[i].loss)
                .fold(f64::INFINITY, f64::min)
        };
        best(&buckets[a]).total_cmp(&best(&buckets[b])).then(a.cmp(&b))
    });
    for k in 0..remainder {
        if by_best_loss.is_empty() {
            break;
        }
        quota[by_best_loss[k % by_best_loss.len()]] += 1;
    }

    let mut survivors: Vec<Individual> = Vec::with_capacity(settings.population);
    let mut leftover = 0usize;
    let fill = |bucket: &mut Vec<usize>, want: usize, out: &mut Vec<Individual>| {
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < want && !bucket.is_empty() {
            // Joint crowding over remaining candidates plus survivors.
            let union: Vec<usize> = bucket.iter().chain(chosen.iter()).copied().collect();
            let pts: Vec<(f64, f64)> = union
                .iter()
                .map(|&i| (candidates[i].loss, candidates[i].macs_norm))
                .collect();
            let crowd = crowding_distance(&pts);
            let scored = |i: usize| {
                let mut c = candidates[union[i]].clone();
                c.crowding = crowd[i];
                c
            };
            let gap_ok = |i: usize| {
                chosen.iter().all(|&s| {
                    (candidates[i].macs_norm - candidates[s].macs_norm).abs() >= settings.min_gap
                })
            };
            // Best gap-respecting candidate, else best candidate outright.
            let mut pick: Option<usize> = None; // position in bucket
            let mut pick_fallback: Option<usize> = None;
            for pos in 0..bucket.len() {
                let cand = scored(pos);
                let better = |cur: &Option<usize>| match *cur {
                    None => true,
                    Some(q) => preferred(&cand, &scored(q)).is_lt(),
                };
                if gap_ok(bucket[pos]) {
                    if better(&pick) {
                        pick = Some(pos);
                    }
                } else if better(&pick_fallback) {
                    pick_fallback = Some(pos);
                }
            }
            let pos = match pick.or(pick_fallback) {
                Some(pos) => pos,
                None => break,
            };
            let idx = bucket.remove(pos);
            chosen.push(idx);
        }
        let got = chosen.len();
        for idx in chosen {
            out.push(candidates[idx].clone());
        }
        want - got
    };

    for b in 0..p {
        let want = quota[b];
        let mut bucket = core::mem::take(&mut buckets[b]);
        leftover += fill(&mut bucket, want, &mut survivors);
        buckets[b] = bucket;
    }
    // Second pass: hand unused quota to intervals that still have
    // candidates, best-loss intervals first.
    for &b in &by_best_loss {
        if leftover == 0 {
            break;
        }
        if buckets[b].is_empty() {
            continue;
        }
        let mut bucket = core::mem::take(&mut buckets[b]);
        let got_short = fill(&mut bucket, leftover, &mut survivors);
        leftover = got_short;
        buckets[b] = bucket;
    }
    Ok(survivors)
}

/// One evaluated genome in the final archive.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub bits: Vec<bool>,
    pub loss: f64,
    pub macs_norm: f64,
    pub macs: u64,
    pub front_rank: usize,
}

/// Per-generation snapshot of the archive's non-dominated front.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationStat {
    pub generation: usize,
    /// Distinct genomes evaluated so far.
    pub evaluations: usize,
    /// Evaluations that produced a non-finite loss so far.
    pub nonfinite: usize,
    pub best_loss: f64,
    /// `(macs_norm, loss)` staircase, cost ascending / loss descending.
    pub front: Vec<(f64, f64)>,
}

/// Every genome evaluated during a search, ranked into fronts, plus the
/// per-generation front history.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoArchive {
    /// Sorted by `(front_rank, macs_norm, loss)`.
    pub entries: Vec<ArchiveEntry>,
    pub history: Vec<GenerationStat>,
}

impl ParetoArchive {
    pub fn front(&self) -> impl Iterator<Item = &ArchiveEntry> {
        self.entries.iter().filter(|e| e.front_rank == 0)
    }
}

/// Front-0 member whose cost sits closest to the target; ties prefer lower
/// loss, then lower cost.
pub fn nearest_pareto(archive: &ParetoArchive, m_t: f64) -> Result<&ArchiveEntry> {
    archive
        .front()
        .min_by(|a, b| {
            (a.macs_norm - m_t)
                .abs()
                .total_cmp(&(b.macs_norm - m_t).abs())
                .then(a.loss.total_cmp(&b.loss))
                .then(a.macs_norm.total_cmp(&b.macs_norm))
        })
        .ok_or_else(|| Error::Search("archive has an empty front".into()))
}

/// Running 2-D Pareto staircase: insert keeps macs strictly increasing and
/// loss strictly decreasing.
struct RunningFront {
    pts: Vec<(f64, f64)>,
}

impl RunningFront {
    fn new() -> Self {
        RunningFront { pts: Vec::new() }
    }

    fn insert(&mut self, m: f64, l: f64) {
        let idx = self.pts.partition_point(|p| p.0 < m);
        if idx > 0 && self.pts[idx - 1].1 <= l {
            return; // dominated by a cheaper-or-equal, better-or-equal point
        }
        if idx < self.pts.len() && self.pts[idx].0 == m && self.pts[idx].1 <= l {
            return;
        }
        let mut end = idx;
        while end < self.pts.len() && self.pts[end].1 >= l {
            end += 1;
        }
        self.pts.drain(idx..end);
        self.pts.insert(idx, (m, l));
    }
}

struct Evaluator<'a, T: Scalar> {
    params: &'a ElasticParams<T>,
    spec: &'a BackboneSpec,
    codec: ConfigCodec,
    feats: Vec<T>,
    labels: Vec<usize>,
    memo: BTreeMap<Vec<bool>, (f64, f64, u64)>,
    nonfinite: usize,
}

impl<'a, T: Scalar> Evaluator<'a, T> {
    fn eval(&mut self, bits: &[bool]) -> Result<Individual> {
        if let Some(&(loss, mn, _)) = self.memo.get(bits) {
            return Ok(Individual {
                bits: bits.to_vec(),
                loss,
                macs_norm: mn,
                front_rank: 0,
                crowding: 0.0,
            });
        }
        let cfg = self.codec.decode(bits)?;
        let total = macs(self.spec, &cfg);
        let mn = macs_norm(self.spec, &cfg);
        let batch = self.labels.len();
        let logits = forward_plain(self.params, self.spec, &cfg, &self.feats, batch, &mut NoProbe)?;
        let (loss_t, _) =
            crate::kernels::cross_entropy(&logits, &self.labels, batch, self.spec.classes);
        let mut loss = loss_t.as_f64();
        if !loss.is_finite() {
            loss = f64::INFINITY;
            self.nonfinite += 1;
        }
        self.memo.insert(bits.to_vec(), (loss, mn, total));
        Ok(Individual {
            bits: bits.to_vec(),
            loss,
            macs_norm: mn,
            front_rank: 0,
            crowding: 0.0,
        })
    }
}

fn binary_tournament<'a>(pop: &'a [Individual], rng: &mut Chacha) -> &'a Individual {
    let a = &pop[rng::pick(rng, 0, pop.len() - 1)];
    let b = &pop[rng::pick(rng, 0, pop.len() - 1)];
    if preferred(a, b).is_le() {
        a
    } else {
        b
    }
}

fn make_child(
    pa: &[bool],
    pb: &[bool],
    crossover_p: f64,
    bit_p: f64,
    rng: &mut Chacha,
) -> Vec<bool> {
    use rand::Rng;
    let mut child: Vec<bool> = if pa.len() > 1 && rng.gen::<f64>() < crossover_p {
        let cut = rng::pick(rng, 1, pa.len() - 1);
        pa[..cut].iter().chain(pb[cut..].iter()).copied().collect()
    } else {
        pa.to_vec()
    };
    for b in child.iter_mut() {
        if rng.gen::<f64>() < bit_p {
            *b = !*b;
        }
    }
    child
}

fn rank_and_crowd(pop: &mut [Individual]) {
    let fronts = fast_nondominated_sort(pop);
    for front in fronts {
        let pts: Vec<(f64, f64)> = front.iter().map(|&i| (pop[i].loss, pop[i].macs_norm)).collect();
        let crowd = crowding_distance(&pts);
        for (k, &i) in front.iter().enumerate() {
            pop[i].crowding = crowd[k];
        }
    }
}

/// Run the full search against a frozen supernet. Deterministic in `seed`.
pub fn evolve<T: Scalar>(
    params: &ElasticParams<T>,
    spec: &BackboneSpec,
    data: &TokenDataset<T>,
    settings: &SearchSettings,
    seed: u64,
) -> Result<ParetoArchive> {
    settings.validate()?;
    data.validate(spec)?;
    if data.is_empty() {
        return Err(Error::Input("search needs a non-empty dataset".into()));
    }
    let mut rng = rng::derived(seed, "search");

    // One fixed fitness batch for the whole search.
    let n_eval = settings.eval_batch.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for i in 0..n_eval {
        let j = rng::pick(&mut rng, i, data.len() - 1);
        order.swap(i, j);
    }
    let (feats, labels) = data.gather(&order[..n_eval]);

    let codec = ConfigCodec::new(spec);
    let glen = codec.len();
    let mut ev = Evaluator {
        params,
        spec,
        codec,
        feats,
        labels,
        memo: BTreeMap::new(),
        nonfinite: 0,
    };
    let mut front = RunningFront::new();
    let mut history: Vec<GenerationStat> = Vec::new();
    let bit_p = settings.mutation_p / glen as f64;

    // Boundary seeds, then offspring of the seeds until the population is
    // full.
    let mut pop: Vec<Individual> = Vec::with_capacity(settings.population);
    pop.push(ev.eval(&alloc::vec![false; glen])?);
    pop.push(ev.eval(&alloc::vec![true; glen])?);
    while pop.len() < settings.population {
        let pa = &pop[rng::pick(&mut rng, 0, pop.len() - 1)].bits.clone();
        let pb = &pop[rng::pick(&mut rng, 0, pop.len() - 1)].bits.clone();
        let child = make_child(pa, pb, settings.crossover_p, bit_p, &mut rng);
        pop.push(ev.eval(&child)?);
    }
    for ind in &pop {
        front.insert(ind.macs_norm, ind.loss);
    }
    let log_gen = |g: usize, ev: &Evaluator<T>, front: &RunningFront| GenerationStat {
        generation: g,
        evaluations: ev.memo.len(),
        nonfinite: ev.nonfinite,
        best_loss: ev
            .memo
            .values()
            .map(|v| v.0)
            .fold(f64::INFINITY, f64::min),
        front: front.pts.clone(),
    };
    history.push(log_gen(0, &ev, &front));

    for g in 1..=settings.generations {
        rank_and_crowd(&mut pop);
        let mut combined = pop.clone();
        for _ in 0..settings.population {
            let pa = binary_tournament(&pop, &mut rng).bits.clone();
            let pb = binary_tournament(&pop, &mut rng).bits.clone();
            let child = make_child(&pa, &pb, settings.crossover_p, bit_p, &mut rng);
            let ind = ev.eval(&child)?;
            front.insert(ind.macs_norm, ind.loss);
            combined.push(ind);
        }
        rank_and_crowd(&mut combined);
        pop = partitioned_select(&combined, settings)?;
        history.push(log_gen(g, &ev, &front));
    }

    // Rank everything ever evaluated.
    let mut all: Vec<Individual> = ev
        .memo
        .iter()
        .map(|(bits, &(loss, mn, _))| Individual {
            bits: bits.clone(),
            loss,
            macs_norm: mn,
            front_rank: 0,
            crowding: 0.0,
        })
        .collect();
    fast_nondominated_sort(&mut all);
    let mut entries: Vec<ArchiveEntry> = all
        .into_iter()
        .map(|i| {
            let macs_abs = ev.memo[&i.bits].2;
            ArchiveEntry {
                bits: i.bits,
                loss: i.loss,
                macs_norm: i.macs_norm,
                macs: macs_abs,
                front_rank: i.front_rank,
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        a.front_rank
            .cmp(&b.front_rank)
            .then(a.macs_norm.total_cmp(&b.macs_norm))
            .then(a.loss.total_cmp(&b.loss))
            .then(a.bits.cmp(&b.bits))
    });
    Ok(ParetoArchive { entries, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ind(loss: f64, mn: f64) -> Individual {
        Individual {
            bits: Vec::new(),
            loss,
            macs_norm: mn,
            front_rank: 0,
            crowding: 0.0,
        }
    }

    #[test]
    fn hand_case_two_fronts() {
        let mut pop = alloc::vec![ind(1.0, 2.0), ind(2.0, 1.0), ind(3.0, 3.0)];
        let fronts = fast_nondominated_sort(&mut pop);
        assert_eq!(fronts, alloc::vec![alloc::vec![0, 1], alloc::vec![2]]);
        assert_eq!(pop[0].front_rank, 0);
        assert_eq!(pop[1].front_rank, 0);
        assert_eq!(pop[2].front_rank, 1);
    }

    #[test]
    fn identical_points_share_one_front() {
        let mut pop = alloc::vec![ind(1.0, 1.0); 5];
        let fronts = fast_nondominated_sort(&mut pop);
        assert_eq!(fronts.len(), 1);
        assert_eq!(fronts[0].len(), 5);
    }

    #[test]
    fn crowding_boundaries_and_middle() {
        assert_eq!(crowding_distance(&[(1.0, 1.0)]), alloc::vec![f64::INFINITY]);
        assert_eq!(
            crowding_distance(&[(1.0, 2.0), (2.0, 1.0)]),
            alloc::vec![f64::INFINITY; 2]
        );
        // Equally spaced collinear points: middle gets 1 + 1.
        let d = crowding_distance(&[(0.0, 2.0), (1.0, 1.0), (2.0, 0.0)]);
        assert!(d[0].is_infinite() && d[2].is_infinite());
        assert!((d[1] - 2.0).abs() < 1e-12, "{}", d[1]);
    }

    #[test]
    fn crowding_is_order_independent() {
        let pts = [(0.1, 0.9), (0.4, 0.3), (0.2, 0.7), (0.9, 0.1), (0.6, 0.2)];
        let base = crowding_distance(&pts);
        let perm = [3usize, 0, 4, 2, 1];
        let shuffled: Vec<(f64, f64)> = perm.iter().map(|&i| pts[i]).collect();
        let d2 = crowding_distance(&shuffled);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(base[i], d2[k]);
        }
    }

    #[test]
    fn zero_range_objective_contributes_nothing() {
        let d = crowding_distance(&[(1.0, 0.0), (1.0, 0.5), (1.0, 1.0)]);
        // Loss range is zero; only the cost axis contributes.
        assert!((d[1] - 1.0).abs() < 1e-12);
    }

    fn settings_small(pop: usize, partitions: usize, gap: f64) -> SearchSettings {
        SearchSettings {
            population: pop,
            partitions,
            min_gap: gap,
            ..SearchSettings::default()
        }
    }

    #[test]
    fn select_takes_best_by_rank_then_crowding() {
        // All in one interval, gaps > min_gap, quota 3 of 4.
        let mut cands = alloc::vec![
            ind(0.9, 0.30),
            ind(0.5, 0.34),
            ind(0.7, 0.32),
            ind(0.3, 0.38),
        ];
        rank_and_crowd(&mut cands);
        let out = partitioned_select(&cands, &settings_small(3, 1, 0.005)).unwrap();
        assert_eq!(out.len(), 3);
        // Front 0 is everything (strictly decreasing loss with rising cost);
        // boundary points and then the more isolated interior point win.
        assert!(out.iter().any(|i| i.loss == 0.9));
        assert!(out.iter().any(|i| i.loss == 0.3));
    }

    #[test]
    fn select_substitutes_when_gap_violated() {
        let mut cands = alloc::vec![
            ind(0.2, 0.500), // best loss
            ind(0.3, 0.501), // within min_gap of the first
            ind(0.4, 0.530), // respects the gap
        ];
        rank_and_crowd(&mut cands);
        let out = partitioned_select(&cands, &settings_small(2, 1, 0.005)).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().any(|i| i.loss == 0.2));
        assert!(
            out.iter().any(|i| i.loss == 0.4),
            "gap-respecting candidate must displace the near-duplicate"
        );
    }

    #[test]
    fn gap_fallback_fills_rather_than_undershooting() {
        let mut cands = alloc::vec![ind(0.2, 0.500), ind(0.3, 0.501)];
        rank_and_crowd(&mut cands);
        let out = partitioned_select(&cands, &settings_small(2, 1, 0.05)).unwrap();
        assert_eq!(out.len(), 2, "quota beats the gap when nothing else is left");
    }

    #[test]
    fn every_nonempty_interval_keeps_a_survivor() {
        let mut cands = alloc::vec![
            ind(0.9, 0.05),
            ind(0.8, 0.12),
            ind(0.1, 0.55),
            ind(0.2, 0.57),
            ind(0.3, 0.95),
        ];
        rank_and_crowd(&mut cands);
        let out = partitioned_select(&cands, &settings_small(4, 10, 0.005)).unwrap();
        for interval in [0usize, 1, 5, 9] {
            assert!(
                out.iter().any(|i| interval_of(i.macs_norm, 10) == interval),
                "interval {interval} lost all members: {out:?}"
            );
        }
    }

    #[test]
    fn empty_candidates_error() {
        assert!(partitioned_select(&[], &SearchSettings::default()).is_err());
    }

    #[test]
    fn running_front_maintains_staircase() {
        let mut f = RunningFront::new();
        for &(m, l) in &[
            (0.5, 0.5),
            (0.3, 0.9),
            (0.8, 0.2),
            (0.4, 0.6),  // new staircase point
            (0.6, 0.6),  // dominated by (0.5, 0.5)
            (0.5, 0.5),  // duplicate
            (0.2, 0.45), // dominates (0.3,0.9), (0.4,0.6), (0.5,0.5)
        ] {
            f.insert(m, l);
        }
        assert_eq!(f.pts, alloc::vec![(0.2, 0.45), (0.8, 0.2)]);
        for w in f.pts.windows(2) {
            assert!(w[0].0 < w[1].0 && w[0].1 > w[1].1);
        }
    }

    #[test]
    fn nearest_prefers_distance_then_loss_then_cost() {
        let archive = ParetoArchive {
            entries: alloc::vec![
                ArchiveEntry {
                    bits: alloc::vec![false],
                    loss: 0.9,
                    macs_norm: 0.2,
                    macs: 10,
                    front_rank: 0,
                },
                ArchiveEntry {
                    bits: alloc::vec![true],
                    loss: 0.4,
                    macs_norm: 0.6,
                    macs: 30,
                    front_rank: 0,
                },
                ArchiveEntry {
                    bits: alloc::vec![true, true],
                    loss: 0.8,
                    macs_norm: 0.9,
                    macs: 45,
                    front_rank: 1,
                },
            ],
            history: Vec::new(),
        };
        assert_eq!(nearest_pareto(&archive, 0.59).unwrap().loss, 0.4);
        assert_eq!(nearest_pareto(&archive, 0.0).unwrap().macs_norm, 0.2);
        // Equidistant between 0.2 and 0.6: lower loss wins.
        assert_eq!(nearest_pareto(&archive, 0.4).unwrap().loss, 0.4);
        // Rank-1 members never count.
        assert_eq!(nearest_pareto(&archive, 2.0).unwrap().macs_norm, 0.6);
    }

    #[test]
    fn nearest_on_empty_front_errors() {
        let archive = ParetoArchive {
            entries: Vec::new(),
            history: Vec::new(),
        };
        assert!(nearest_pareto(&archive, 0.5).is_err());
    }
}
